//! Subcommand implementations. Each command reads and writes only the
//! documented artifact formats, writes a resolved-config snapshot plus
//! provenance sidecars, and logs line-delimited JSON events.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mpgn_core::corpus::synth::{synth_corpus, TopicVocab};
use mpgn_core::corpus::{
    build_corpus, write_features, write_jsonl_track, AnnotatedQuery, AnnotatedQueryRecord,
    CorpusIndex, ManifestEntry,
};
use mpgn_core::eval::{evaluate, EvalReport};
use mpgn_core::firewall::{annotation_read_count_thread, EvalScope};
use mpgn_core::providers::Providers;
use mpgn_core::querygen::{generate_for_moments, GenerateOptions, Modality, PseudoQuery, PseudoQueryRecord};
use mpgn_core::sampling::{
    sample_feature_moments, sample_subtitle_moments, MomentRecord, TemporalMoment,
};
use mpgn_core::training::{train_loop, Checkpoint, ModalityMix, TrainError};

use crate::config::{config_snapshot, PipelineConfig, SampleMethod};
use crate::ioutil::{
    atomic_write, read_json, read_jsonl, write_json, write_jsonl, write_provenance,
};
use crate::jsonlog::log_event;

pub struct Ctx {
    pub out: PathBuf,
    pub cfg: PipelineConfig,
    pub config_hash: String,
    pub command: String,
}

impl Ctx {
    pub fn new(out: PathBuf, cfg: PipelineConfig, command: &str) -> Result<Self> {
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        let (snapshot, hash) = config_snapshot(&cfg)?;
        atomic_write(
            &out.join(format!("{command}_config.json")),
            snapshot.as_bytes(),
        )?;
        Ok(Ctx {
            out,
            cfg,
            config_hash: hash,
            command: command.to_string(),
        })
    }

    fn provenance(&self, artifact: &Path) -> Result<()> {
        write_provenance(artifact, &self.command, &self.config_hash, self.cfg.seed())
    }

    fn corpus_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| self.out.join("corpus"))
    }

    fn load_corpus(&self, explicit: Option<&Path>) -> Result<CorpusIndex> {
        let dir = self.corpus_dir(explicit);
        let manifest = dir.join("manifest.json");
        if !manifest.is_file() {
            bail!(
                "missing upstream corpus manifest {} (run `mpgn synth` or point --corpus at one)",
                manifest.display()
            );
        }
        Ok(build_corpus(&manifest)?)
    }
}

pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let synth_cfg = ctx.cfg.synth_config();
    let out = synth_corpus(&synth_cfg)?;
    let dir = ctx.out.join("corpus");
    std::fs::create_dir_all(dir.join("subs"))?;
    std::fs::create_dir_all(dir.join("feats"))?;

    let mut manifest = Vec::new();
    for rec in out.corpus.iter() {
        let subs_rel = format!("subs/{}.jsonl", rec.video_id);
        let vis_rel = format!("feats/{}.vis.fmat", rec.video_id);
        let sub_rel = format!("feats/{}.sub.fmat", rec.video_id);
        atomic_write(
            &dir.join(&subs_rel),
            write_jsonl_track(&rec.track).as_bytes(),
        )?;
        write_features(&dir.join(&vis_rel), &rec.visual)?;
        let subtitle_features = match &rec.subtitle_features {
            Some(sub) => {
                write_features(&dir.join(&sub_rel), sub)?;
                Some(sub_rel)
            }
            None => None,
        };
        manifest.push(ManifestEntry {
            video_id: rec.video_id.clone(),
            duration_s: Some(rec.duration_s),
            subtitles: subs_rel,
            visual_features: vis_rel,
            subtitle_features,
        });
    }
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    ctx.provenance(&manifest_path)?;

    let vocab_path = dir.join("vocab.json");
    write_json(&vocab_path, &out.vocab)?;

    let scope = EvalScope::open();
    let eval_records: Vec<AnnotatedQueryRecord> =
        out.annotated.iter().map(|q| q.to_record(&scope)).collect();
    let eval_path = dir.join("eval_queries.jsonl");
    write_jsonl(&eval_path, &eval_records)?;
    ctx.provenance(&eval_path)?;

    log_event(
        "synth_done",
        json!({
            "videos": out.corpus.len(),
            "annotated_queries": eval_records.len(),
            "dir": dir.display().to_string(),
        }),
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusReport {
    videos: usize,
    cues: usize,
    mean_duration_s: f64,
    visual_dims: usize,
    stride_s: f32,
    videos_with_subtitle_features: usize,
}

pub fn cmd_ingest(ctx: &Ctx, manifest: &Path) -> Result<()> {
    if !manifest.is_file() {
        bail!("missing upstream manifest {}", manifest.display());
    }
    let corpus = build_corpus(manifest)?;
    let cues: usize = corpus.iter().map(|r| r.track.len()).sum();
    let duration: f64 = corpus.iter().map(|r| r.duration_s).sum();
    let first = corpus.iter().next().expect("non-empty corpus");
    let report = CorpusReport {
        videos: corpus.len(),
        cues,
        mean_duration_s: duration / corpus.len() as f64,
        visual_dims: first.visual.dims,
        stride_s: first.visual.stride_s,
        videos_with_subtitle_features: corpus
            .iter()
            .filter(|r| r.subtitle_features.is_some())
            .count(),
    };
    let path = ctx.out.join("corpus_report.json");
    write_json(&path, &report)?;
    ctx.provenance(&path)?;
    log_event("ingest_done", serde_json::to_value(&report)?);
    Ok(())
}

pub fn cmd_sample(ctx: &Ctx, corpus: Option<&Path>, method: SampleMethod) -> Result<()> {
    let corpus = ctx.load_corpus(corpus)?;
    let moments: Vec<TemporalMoment> = match method {
        SampleMethod::Subtitle => {
            let cfg = ctx.cfg.sampler_config();
            cfg.validate()?;
            corpus
                .iter()
                .flat_map(|rec| sample_subtitle_moments(&rec.track, &cfg))
                .collect()
        }
        SampleMethod::Feature => {
            let cfg = ctx.cfg.feature_sampler_config();
            let mut all = Vec::new();
            for rec in corpus.iter() {
                for span in sample_feature_moments(&rec.visual, &cfg) {
                    if let Some(m) = span.to_moment(&rec.track) {
                        all.push(m);
                    }
                }
            }
            all
        }
    };
    let records: Vec<MomentRecord> = moments.iter().map(|m| m.to_record()).collect();
    let path = ctx.out.join("moments.jsonl");
    write_jsonl(&path, &records)?;
    ctx.provenance(&path)?;
    log_event(
        "sample_done",
        json!({ "moments": records.len(), "method": format!("{method:?}").to_lowercase() }),
    );
    Ok(())
}

fn build_providers(ctx: &Ctx, corpus_dir: &Path) -> Result<Providers> {
    let mut provider_cfg = ctx.cfg.provider.clone();
    // MPGN_PROVIDER_URL points generation at a live serving endpoint.
    if let Ok(url) = std::env::var("MPGN_PROVIDER_URL") {
        if !url.trim().is_empty() {
            provider_cfg.base_url = Some(url);
            provider_cfg.mode = mpgn_core::providers::ProviderMode::Http;
        }
    }
    let vocab_path = corpus_dir.join("vocab.json");
    let vocab: Option<TopicVocab> = if vocab_path.is_file() {
        Some(read_json(&vocab_path)?)
    } else {
        None
    };
    Ok(Providers::from_config(&provider_cfg, vocab)?)
}

pub fn cmd_generate(ctx: &Ctx, corpus: Option<&Path>, moments: Option<&Path>) -> Result<()> {
    let corpus_dir = ctx.corpus_dir(corpus);
    let index = ctx.load_corpus(Some(&corpus_dir))?;
    let moments_path = moments
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ctx.out.join("moments.jsonl"));
    let records: Vec<MomentRecord> = read_jsonl(&moments_path)?;
    let moments: Vec<TemporalMoment> = records.into_iter().map(TemporalMoment::from_record).collect();

    let providers = build_providers(ctx, &corpus_dir)?;
    let opts = GenerateOptions {
        modalities: ctx.cfg.generate.modalities.clone(),
        include_speaker: ctx.cfg.generate.include_speaker,
        max_in_flight: ctx.cfg.provider.max_in_flight,
    };
    let dataset = generate_for_moments(&index, &moments, &providers, &opts)?;
    for failure in &dataset.failures {
        log_event("moment_failed", serde_json::to_value(failure)?);
    }
    let query_records: Vec<PseudoQueryRecord> =
        dataset.queries.iter().map(|q| q.to_record()).collect();
    let queries_path = ctx.out.join("queries.jsonl");
    write_jsonl(&queries_path, &query_records)?;
    ctx.provenance(&queries_path)?;
    let stats_path = ctx.out.join("stats.json");
    write_json(&stats_path, &dataset.stats)?;
    ctx.provenance(&stats_path)?;
    log_event(
        "generate_done",
        json!({
            "queries": query_records.len(),
            "failed_moments": dataset.failures.len(),
            "mean_moment_length_s": dataset.stats.mean_moment_length_s,
        }),
    );
    Ok(())
}

fn corpus_dims(corpus: &CorpusIndex) -> Result<(usize, Option<usize>)> {
    let mut visual_dim = None;
    let mut subtitle_dim: Option<usize> = None;
    let mut all_have_subs = true;
    for rec in corpus.iter() {
        match visual_dim {
            None => visual_dim = Some(rec.visual.dims),
            Some(d) if d != rec.visual.dims => {
                bail!(
                    "inconsistent visual feature dims: {} vs {d} ({})",
                    rec.visual.dims,
                    rec.video_id
                )
            }
            _ => {}
        }
        match &rec.subtitle_features {
            Some(sub) => match subtitle_dim {
                None => subtitle_dim = Some(sub.dims),
                Some(d) if d != sub.dims => {
                    bail!("inconsistent subtitle feature dims ({})", rec.video_id)
                }
                _ => {}
            },
            None => all_have_subs = false,
        }
    }
    let _ = all_have_subs;
    Ok((visual_dim.context("empty corpus")?, subtitle_dim))
}

/// Convert annotated queries into training samples. Only reachable through
/// the explicit `--supervised` flag; each query lands in both modality
/// pools.
fn annotated_as_training(records: Vec<AnnotatedQueryRecord>) -> Result<Vec<PseudoQuery>> {
    let scope = EvalScope::open();
    let mut out = Vec::new();
    for rec in records {
        let q = AnnotatedQuery::from_record(rec)?;
        let (ts, te) = q.interval(&scope);
        for modality in [Modality::Visual, Modality::Textual] {
            out.push(PseudoQuery {
                query_id: format!("sup:{}:{modality}", q.query_id(&scope)),
                moment: TemporalMoment {
                    video_id: q.video_id(&scope).to_string(),
                    cue_start_idx: 1,
                    cue_end_idx: 1,
                    ts_s: ts,
                    te_s: te,
                },
                modality,
                text: q.text(&scope).to_string(),
            });
        }
    }
    Ok(out)
}

pub fn cmd_train(
    ctx: &Ctx,
    corpus: Option<&Path>,
    queries: Option<&Path>,
    resume: Option<&Path>,
    supervised: bool,
) -> Result<()> {
    let corpus_dir = ctx.corpus_dir(corpus);
    let index = ctx.load_corpus(Some(&corpus_dir))?;
    let queries_path = queries
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ctx.out.join("queries.jsonl"));
    let records: Vec<PseudoQueryRecord> = read_jsonl(&queries_path)?;
    let mut pseudo: Vec<PseudoQuery> = records.into_iter().map(PseudoQuery::from_record).collect();

    let reads_before = annotation_read_count_thread();
    if supervised {
        let eval_path = corpus_dir.join("eval_queries.jsonl");
        let annotated: Vec<AnnotatedQueryRecord> = read_jsonl(&eval_path)?;
        let extra = annotated_as_training(annotated)?;
        log_event(
            "supervised_enabled",
            json!({ "annotated_training_queries": extra.len() }),
        );
        pseudo.extend(extra);
    }

    let (visual_dim, subtitle_dim) = corpus_dims(&index)?;
    let model_cfg = ctx
        .cfg
        .model
        .to_model_config(ctx.cfg.seed(), visual_dim, subtitle_dim);
    model_cfg.validate()?;
    let train_cfg = ctx.cfg.train.to_train_config(ctx.cfg.seed());

    let resume_state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            // The epoch target may grow on resume; everything else that
            // shapes the trajectory must match.
            let comparable = mpgn_core::training::TrainConfig {
                epochs: train_cfg.epochs,
                ..ckpt.train_config.clone()
            };
            if ckpt.model_config != model_cfg || comparable != train_cfg {
                bail!(
                    "checkpoint {} was produced under a different config; refusing to resume",
                    path.display()
                );
            }
            Some(ckpt.state)
        }
        None => None,
    };

    let ckpt_dir = ctx.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let model_cfg_for_sink = model_cfg.clone();
    let train_cfg_for_sink = train_cfg.clone();
    let outcome = train_loop(
        &index,
        &pseudo,
        &model_cfg,
        &train_cfg,
        resume_state,
        |state| {
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", state.completed_epochs));
            Checkpoint::new(
                model_cfg_for_sink.clone(),
                train_cfg_for_sink.clone(),
                state.clone(),
            )
            .save(&path)
            .map_err(|e| TrainError::Checkpoint {
                path,
                reason: e.to_string(),
            })
        },
    )?;

    if !supervised {
        let reads_after = annotation_read_count_thread();
        if reads_after != reads_before {
            bail!(
                "annotation firewall violated: {} annotated reads during unsupervised training",
                reads_after - reads_before
            );
        }
    }

    let final_path = ctx.out.join("checkpoint.ckpt");
    Checkpoint::new(model_cfg, train_cfg, outcome.state.clone()).save(&final_path)?;
    ctx.provenance(&final_path)?;

    let mut csv = String::from("step,epoch,modality,l_vr,l_vmr,l_vcl,l_fcl,total\n");
    for row in &outcome.curve {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.step, row.epoch, row.modality, row.l_vr, row.l_vmr, row.l_vcl, row.l_fcl, row.total
        ));
    }
    let curve_path = ctx.out.join("curve.csv");
    atomic_write(&curve_path, csv.as_bytes())?;
    ctx.provenance(&curve_path)?;

    log_event(
        "train_done",
        json!({
            "epochs": outcome.state.completed_epochs,
            "steps": outcome.state.global_step,
            "final_total_loss": outcome.curve.last().map(|r| r.total),
        }),
    );
    Ok(())
}

/// Eval report artifact: metric tables plus provenance of the evaluated
/// checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub label: String,
    pub config_hash: String,
    pub modality_mix: ModalityMix,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aver: Option<f64>,
    pub reports: Vec<EvalReport>,
}

pub fn cmd_eval(
    ctx: &Ctx,
    corpus: Option<&Path>,
    checkpoint: Option<&Path>,
    queries: Option<&Path>,
    label: Option<&str>,
) -> Result<()> {
    let corpus_dir = ctx.corpus_dir(corpus);
    let index = ctx.load_corpus(Some(&corpus_dir))?;
    let ckpt_path = checkpoint
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ctx.out.join("checkpoint.ckpt"));
    if !ckpt_path.is_file() {
        bail!("missing upstream checkpoint {}", ckpt_path.display());
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let (visual_dim, subtitle_dim) = corpus_dims(&index)?;
    if ckpt.model_config.visual_dim != visual_dim
        || ckpt.model_config.subtitle_dim != subtitle_dim
    {
        bail!(
            "checkpoint {} expects feature dims ({}, {:?}) but the corpus provides ({}, {:?})",
            ckpt_path.display(),
            ckpt.model_config.visual_dim,
            ckpt.model_config.subtitle_dim,
            visual_dim,
            subtitle_dim
        );
    }

    let queries_path = queries
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| corpus_dir.join("eval_queries.jsonl"));
    let records: Vec<AnnotatedQueryRecord> = read_jsonl(&queries_path)?;
    let annotated: Vec<AnnotatedQuery> = records
        .into_iter()
        .map(AnnotatedQuery::from_record)
        .collect::<Result<_, _>>()?;

    let scope = EvalScope::open();
    let opts = ctx.cfg.eval_options();
    let outcome = evaluate(
        &index,
        &annotated,
        &ckpt.model_config,
        &ckpt.state.params,
        &opts,
        &scope,
    )?;

    let prediction_records: Vec<_> = outcome
        .predictions
        .values()
        .flat_map(|preds| preds.iter().map(|p| p.to_record()))
        .collect();
    let pred_path = ctx.out.join("predictions.jsonl");
    write_jsonl(&pred_path, &prediction_records)?;
    ctx.provenance(&pred_path)?;

    let aver = outcome.reports.iter().find_map(|r| r.aver);
    let report = ReportFile {
        label: label.unwrap_or("default").to_string(),
        config_hash: ctx.config_hash.clone(),
        modality_mix: ckpt.train_config.modality_mix,
        seed: ckpt.train_config.seed,
        epochs: ckpt.state.completed_epochs,
        aver,
        reports: outcome.reports,
    };
    let report_path = ctx.out.join("report.json");
    write_json(&report_path, &report)?;
    ctx.provenance(&report_path)?;
    log_event(
        "eval_done",
        json!({ "queries": annotated.len(), "aver": aver }),
    );
    Ok(())
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

pub fn cmd_report(ctx: &Ctx, inputs: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let report: ReportFile = read_json(path)?;
        let vcmr07 = report
            .reports
            .iter()
            .find(|r| r.task == mpgn_core::eval::Task::Vcmr && r.iou_threshold == Some(0.7));
        let vr = report
            .reports
            .iter()
            .find(|r| r.task == mpgn_core::eval::Task::Vr);
        let mix = match report.modality_mix {
            ModalityMix::AlternateUniform => "alternate_uniform",
            ModalityMix::VisualOnly => "visual_only",
            ModalityMix::TextualOnly => "textual_only",
            ModalityMix::MixedConcat => "mixed_concat",
        };
        rows.push((
            mix.to_string(),
            report.label.clone(),
            fmt_pct(vr.and_then(|r| r.recall_at.get(&1).copied())),
            fmt_pct(vcmr07.and_then(|r| r.recall_at.get(&1).copied())),
            fmt_pct(vcmr07.and_then(|r| r.recall_at.get(&10).copied())),
            fmt_pct(vcmr07.and_then(|r| r.recall_at.get(&100).copied())),
            fmt_pct(report.aver),
        ));
    }
    let mut md = String::new();
    md.push_str("| mix | label | VR R@1 | VCMR R@1 (IoU 0.7) | VCMR R@10 (IoU 0.7) | VCMR R@100 (IoU 0.7) | AveR |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for (mix, label, vr1, r1, r10, r100, aver) in &rows {
        md.push_str(&format!(
            "| {mix} | {label} | {vr1} | {r1} | {r10} | {r100} | {aver} |\n"
        ));
    }
    let out_path = output
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ctx.out.join("report.md"));
    atomic_write(&out_path, md.as_bytes())?;
    ctx.provenance(&out_path)?;
    println!("{md}");
    log_event("report_done", json!({ "rows": rows.len() }));
    Ok(())
}

/// Per-video training-input view keyed for deterministic ordering; used by
/// tests that need to poke at prepared batches.
pub fn pseudo_queries_from_file(path: &Path) -> Result<Vec<PseudoQuery>> {
    let records: Vec<PseudoQueryRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(PseudoQuery::from_record).collect())
}

/// Group helper used by the report tests.
pub fn reports_by_mix(reports: &[ReportFile]) -> BTreeMap<String, Vec<&ReportFile>> {
    let mut map: BTreeMap<String, Vec<&ReportFile>> = BTreeMap::new();
    for r in reports {
        let mix = format!("{:?}", r.modality_mix);
        map.entry(mix).or_default().push(r);
    }
    map
}
