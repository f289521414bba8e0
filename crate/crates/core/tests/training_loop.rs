//! Desk-scale training behavior: the loss must fall substantially over a
//! full run, and the annotation firewall must stay silent on the training
//! thread while evaluation reads are counted.

use mpgn_core::corpus::synth::{synth_corpus, SynthConfig};
use mpgn_core::eval::{evaluate, EvalOptions, Task};
use mpgn_core::firewall::{annotation_read_count_thread, EvalScope};
use mpgn_core::model::ModelConfig;
use mpgn_core::providers::Providers;
use mpgn_core::querygen::{generate_dataset, GenerateOptions};
use mpgn_core::sampling::SamplerConfig;
use mpgn_core::training::{train_loop, TrainConfig};

fn desk_setup() -> (
    mpgn_core::corpus::CorpusIndex,
    Vec<mpgn_core::querygen::PseudoQuery>,
    Vec<mpgn_core::corpus::AnnotatedQuery>,
    ModelConfig,
) {
    let synth_cfg = SynthConfig {
        n_videos: 10,
        topic_vocab_size: 50,
        feature_dims: 56,
        ..SynthConfig::default()
    };
    let out = synth_corpus(&synth_cfg).unwrap();
    let providers = Providers::stub(Some(out.vocab.clone()));
    let (_, dataset) = generate_dataset(
        &out.corpus,
        &SamplerConfig {
            moments_per_video: 4,
            ..SamplerConfig::default()
        },
        &providers,
        &GenerateOptions::default(),
    )
    .unwrap();
    let model_cfg = ModelConfig {
        hidden_dim: 24,
        n_heads: 4,
        video_blocks: 2,
        query_blocks: 1,
        conv_kernel: 5,
        visual_dim: 56,
        subtitle_dim: Some(56),
        max_time_steps: 128,
        seed: 3,
        ..ModelConfig::default()
    };
    (out.corpus, dataset.queries, out.annotated, model_cfg)
}

#[test]
fn thirty_epochs_halve_the_training_loss() {
    let (corpus, queries, _, model_cfg) = desk_setup();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 10,
        learning_rate: 1e-3,
        seed: 17,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&corpus, &queries, &model_cfg, &cfg, None, |_| Ok(())).unwrap();
    let first_epoch: Vec<f64> = outcome
        .curve
        .iter()
        .filter(|r| r.epoch == 0)
        .map(|r| r.total)
        .collect();
    let last_epoch: Vec<f64> = outcome
        .curve
        .iter()
        .filter(|r| r.epoch == cfg.epochs - 1)
        .map(|r| r.total)
        .collect();
    let initial = first_epoch.iter().sum::<f64>() / first_epoch.len() as f64;
    let fin = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
    assert!(
        fin < 0.5 * initial,
        "final loss {fin:.4} not below half of initial {initial:.4}"
    );
}

#[test]
fn training_thread_never_reads_annotations_while_eval_does() {
    let (corpus, queries, annotated, model_cfg) = desk_setup();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let before = annotation_read_count_thread();
    let outcome = train_loop(&corpus, &queries, &model_cfg, &cfg, None, |_| Ok(())).unwrap();
    assert_eq!(
        annotation_read_count_thread(),
        before,
        "training performed annotated reads"
    );

    let scope = EvalScope::open();
    let opts = EvalOptions {
        tasks: vec![Task::Vcmr],
        iou_thresholds: vec![0.5],
        ks: vec![1],
        video_shortlist: corpus.len(),
    };
    evaluate(
        &corpus,
        &annotated,
        &model_cfg,
        &outcome.state.params,
        &opts,
        &scope,
    )
    .unwrap();
    assert!(
        annotation_read_count_thread() > before,
        "evaluation should read annotations"
    );
}
