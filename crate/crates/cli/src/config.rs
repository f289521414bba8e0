//! Pipeline configuration: one TOML tree whose sections mirror the module
//! configs, dotted-key overrides, and a resolved JSON snapshot with a
//! content hash for provenance.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mpgn_core::corpus::synth::SynthConfig;
use mpgn_core::eval::Task;
use mpgn_core::providers::ProviderConfig;
use mpgn_core::querygen::Modality;
use mpgn_core::sampling::{FeatureSamplerConfig, SamplerConfig};
use mpgn_core::training::{ModalityMix, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_videos: usize,
    pub cues_per_video: (usize, usize),
    pub scenes_per_video: usize,
    pub topic_vocab_size: usize,
    pub feature_dims: usize,
    pub noise_sigma: f32,
    pub stride_s: f32,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            n_videos: d.n_videos,
            cues_per_video: d.cues_per_video,
            scenes_per_video: d.scenes_per_video,
            topic_vocab_size: d.topic_vocab_size,
            feature_dims: d.feature_dims,
            noise_sigma: d.noise_sigma,
            stride_s: d.stride_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    Subtitle,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub method: SampleMethod,
    pub l_min: usize,
    pub l_max: usize,
    pub moments_per_video: usize,
    pub dedup: bool,
    /// Cosine threshold of the feature-based baseline.
    pub feature_threshold: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection {
            method: SampleMethod::Subtitle,
            l_min: d.l_min,
            l_max: d.l_max,
            moments_per_video: d.moments_per_video,
            dedup: d.dedup,
            feature_threshold: FeatureSamplerConfig::default().threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    pub modalities: Vec<Modality>,
    pub include_speaker: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            modalities: vec![Modality::Visual, Modality::Textual],
            include_speaker: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub video_blocks: usize,
    pub query_blocks: usize,
    pub conv_kernel: usize,
    pub temperature: f64,
    pub margin: f64,
    pub loss_weights: [f64; 4],
    pub max_moment_steps: usize,
    pub max_time_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = mpgn_core::model::ModelConfig::default();
        ModelSection {
            hidden_dim: d.hidden_dim,
            n_heads: d.n_heads,
            video_blocks: d.video_blocks,
            query_blocks: d.query_blocks,
            conv_kernel: d.conv_kernel,
            temperature: d.temperature,
            margin: d.margin,
            loss_weights: d.loss_weights,
            max_moment_steps: d.max_moment_steps,
            max_time_steps: d.max_time_steps,
        }
    }
}

impl ModelSection {
    /// Instantiate the model config against a corpus' feature dimensions.
    pub fn to_model_config(
        &self,
        seed: u64,
        visual_dim: usize,
        subtitle_dim: Option<usize>,
    ) -> mpgn_core::model::ModelConfig {
        mpgn_core::model::ModelConfig {
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            video_blocks: self.video_blocks,
            query_blocks: self.query_blocks,
            conv_kernel: self.conv_kernel,
            temperature: self.temperature,
            margin: self.margin,
            loss_weights: self.loss_weights,
            max_moment_steps: self.max_moment_steps,
            max_time_steps: self.max_time_steps,
            visual_dim,
            subtitle_dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub modality_mix: ModalityMix,
    pub dataset_fraction: f64,
    pub per_sample_modality: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            modality_mix: d.modality_mix,
            dataset_fraction: d.dataset_fraction,
            per_sample_modality: d.per_sample_modality,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            modality_mix: self.modality_mix,
            dataset_fraction: self.dataset_fraction,
            per_sample_modality: self.per_sample_modality,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub tasks: Vec<Task>,
    pub iou_thresholds: Vec<f64>,
    pub ks: Vec<usize>,
    pub video_shortlist: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = mpgn_core::eval::EvalOptions::default();
        EvalSection {
            tasks: d.tasks,
            iou_thresholds: d.iou_thresholds,
            ks: d.ks,
            video_shortlist: d.video_shortlist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub sampler: SamplerSection,
    pub provider: ProviderConfig,
    pub generate: GenerateSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed(),
            n_videos: self.synth.n_videos,
            cues_per_video: self.synth.cues_per_video,
            scenes_per_video: self.synth.scenes_per_video,
            topic_vocab_size: self.synth.topic_vocab_size,
            feature_dims: self.synth.feature_dims,
            noise_sigma: self.synth.noise_sigma,
            stride_s: self.synth.stride_s,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            l_min: self.sampler.l_min,
            l_max: self.sampler.l_max,
            moments_per_video: self.sampler.moments_per_video,
            seed: self.seed(),
            dedup: self.sampler.dedup,
        }
    }

    pub fn feature_sampler_config(&self) -> FeatureSamplerConfig {
        FeatureSamplerConfig {
            threshold: self.sampler.feature_threshold,
            moments_per_video: self.sampler.moments_per_video,
            seed: self.seed(),
        }
    }

    pub fn eval_options(&self) -> mpgn_core::eval::EvalOptions {
        mpgn_core::eval::EvalOptions {
            tasks: self.eval.tasks.clone(),
            iou_thresholds: self.eval.iou_thresholds.clone(),
            ks: self.eval.ks.clone(),
            video_shortlist: self.eval.video_shortlist,
        }
    }
}

/// Load the config file (or defaults), apply `key.path=value` overrides and
/// an optional seed override, and return the resolved config.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<PipelineConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("missing config file {}", p.display()))?;
            text.parse()
                .with_context(|| format!("invalid TOML in {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (key, value) = raw
            .split_once('=')
            .with_context(|| format!("override {raw:?} is not KEY=VALUE"))?;
        apply_override(&mut table, key.trim(), value.trim())?;
    }
    let mut cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .context("config does not match the expected schema")?;
    if let Some(seed) = seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = match format!("x = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap(),
        // Bare words become strings.
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is empty or malformed");
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override key {key:?} crosses a non-table value"))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Canonical JSON of the resolved config plus its SHA-256 hash.
pub fn config_snapshot(cfg: &PipelineConfig) -> Result<(String, String)> {
    let json = serde_json::to_string_pretty(cfg)?;
    let hash = hex_digest(json.as_bytes());
    Ok((json, hash))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
