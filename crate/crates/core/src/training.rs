//! Alternating-modality training loop, AdamW optimizer and checkpoints.
//!
//! Each training step draws one modality (uniform coin per step by default)
//! and a batch of that modality's pseudo queries. All epoch randomness is
//! derived from `(seed, epoch)`, so resuming from an epoch checkpoint
//! reproduces the uninterrupted trajectory bit-exactly.
//!
//! The loop never sees annotated queries: it consumes [`PseudoQuery`] values
//! only, and audits the annotation-read counter of its own thread before and
//! after the run.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusIndex;
use crate::firewall;
use crate::model::params::ModelParams;
use crate::model::tensor::Matrix;
use crate::model::{loss_and_grads, BatchItem, LossComponents, ModelConfig, ModelError, VideoInputs};
use crate::querygen::{Modality, PseudoQuery};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("train config: {0}")]
    Config(String),
    #[error("no {0} queries available for the requested modality mix")]
    EmptyModality(String),
    #[error("query {query_id:?} references unknown video {video_id:?}")]
    UnknownVideo { query_id: String, video_id: String },
    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: u64, report: String },
    #[error("annotation firewall violated: {0} annotated reads during training")]
    AnnotationFirewall(u64),
    #[error("checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMix {
    AlternateUniform,
    VisualOnly,
    TextualOnly,
    MixedConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub modality_mix: ModalityMix,
    /// Fraction of each modality's queries to train on; subsets are nested
    /// prefixes of one seed-shuffled order.
    pub dataset_fraction: f64,
    /// Draw the modality per sample instead of per step.
    #[serde(default)]
    pub per_sample_modality: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            modality_mix: ModalityMix::AlternateUniform,
            dataset_fraction: 1.0,
            per_sample_modality: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be >= 2".into()));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "dataset_fraction {} must lie in (0, 1]",
                self.dataset_fraction
            )));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::Config("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fair per-step modality draw.
pub fn select_modality(rng: &mut ChaCha8Rng) -> Modality {
    if rng.gen_bool(0.5) {
        Modality::Visual
    } else {
        Modality::Textual
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW moment estimates, flat in parameter visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn init(params: &ModelParams<Matrix>) -> Self {
        let zeros: Vec<Matrix> = params
            .flatten()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows, m.cols))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_update(
    params: &mut ModelParams<Matrix>,
    grads: &ModelParams<Matrix>,
    opt: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    opt.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.t as i32);
    let grad_list: Vec<&Matrix> = grads.flatten().into_iter().map(|(_, m)| m).collect();
    let mut idx = 0usize;
    params.for_each_mut(&mut |p| {
        let g = grad_list[idx];
        let m = &mut opt.m[idx];
        let v = &mut opt.v[idx];
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = ADAM_BETA1 * m.data[k] + (1.0 - ADAM_BETA1) * gk;
            v.data[k] = ADAM_BETA2 * v.data[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            p.data[k] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p.data[k]);
        }
        idx += 1;
    });
}

/// Mutable training state: parameters, optimizer moments, progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<Matrix>,
    pub opt: AdamState,
    pub completed_epochs: usize,
    pub global_step: u64,
}

impl TrainState {
    pub fn init(model_cfg: &ModelConfig) -> Self {
        let params = ModelParams::init(model_cfg);
        let opt = AdamState::init(&params);
        TrainState {
            params,
            opt,
            completed_epochs: 0,
            global_step: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub modality: String,
    pub l_vr: f64,
    pub l_vmr: f64,
    pub l_vcl: f64,
    pub l_fcl: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<CurveRow>,
}

struct Bucket {
    items: Vec<BatchItem>,
    order: Vec<usize>,
    cursor: usize,
}

impl Bucket {
    fn new(items: Vec<BatchItem>) -> Self {
        Bucket {
            items,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order = (0..self.items.len()).collect();
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    fn next_item(&mut self) -> BatchItem {
        let idx = self.order[self.cursor % self.order.len()];
        self.cursor += 1;
        self.items[idx].clone()
    }
}

/// Per-modality training pools plus the referenced video inputs.
pub struct TrainData {
    visual: Vec<BatchItem>,
    textual: Vec<BatchItem>,
    videos: BTreeMap<String, VideoInputs>,
}

impl TrainData {
    pub fn visual_items(&self) -> &[BatchItem] {
        &self.visual
    }

    pub fn textual_items(&self) -> &[BatchItem] {
        &self.textual
    }
}

/// Convert pseudo queries into batch items with ground-truth step indices.
/// Dialog-baseline queries train through the textual pool.
pub fn prepare_train_data(
    corpus: &CorpusIndex,
    queries: &[PseudoQuery],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainData, TrainError> {
    let mut visual = Vec::new();
    let mut textual = Vec::new();
    let mut videos = BTreeMap::new();
    for q in queries {
        let record =
            corpus
                .get(&q.moment.video_id)
                .ok_or_else(|| TrainError::UnknownVideo {
                    query_id: q.query_id.clone(),
                    video_id: q.moment.video_id.clone(),
                })?;
        let t = record.visual.rows;
        let stride = record.visual.stride_s as f64;
        let t_start = ((q.moment.ts_s / stride).floor() as usize).min(t - 1);
        let mut t_end = ((q.moment.te_s / stride).floor() as usize).min(t - 1);
        // Targets longer than the predictable window are clipped to it.
        if t_end - t_start + 1 > model_cfg.max_moment_steps {
            t_end = t_start + model_cfg.max_moment_steps - 1;
        }
        let item = BatchItem {
            query_text: q.text.clone(),
            video_id: q.moment.video_id.clone(),
            t_start,
            t_end,
        };
        match q.modality {
            Modality::Visual => visual.push(item),
            Modality::Textual | Modality::Dialog => textual.push(item),
        }
        videos
            .entry(q.moment.video_id.clone())
            .or_insert_with(|| VideoInputs::from_record(record));
    }
    // Nested-prefix subsetting: shuffle once with a fraction-specific seed,
    // keep a prefix. Larger fractions therefore include smaller ones.
    let subset = |items: Vec<BatchItem>, label: &str| {
        if cfg.dataset_fraction >= 1.0 || items.is_empty() {
            return items;
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("fraction_{label}")));
        order.shuffle(&mut rng);
        let keep = ((items.len() as f64) * cfg.dataset_fraction).ceil() as usize;
        order.truncate(keep.max(1));
        order.into_iter().map(|i| items[i].clone()).collect()
    };
    Ok(TrainData {
        visual: subset(visual, "visual"),
        textual: subset(textual, "textual"),
        videos,
    })
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// One optimizer step on an explicit batch.
pub fn train_step(
    items: &[BatchItem],
    videos: &BTreeMap<String, VideoInputs>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<LossComponents, TrainError> {
    let (comps, grads) = loss_and_grads(items, videos, model_cfg, &state.params)?;
    if !comps.total.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.global_step,
            report: format!(
                "vr={:.6} vmr={:.6} vcl={:.6} fcl={:.6} weights={:?}",
                comps.l_vr, comps.l_vmr, comps.l_vcl, comps.l_fcl, model_cfg.loss_weights
            ),
        });
    }
    adamw_update(
        &mut state.params,
        &grads,
        &mut state.opt,
        cfg.learning_rate,
        cfg.weight_decay,
    );
    state.global_step += 1;
    Ok(comps)
}

fn assemble_batch(
    bucket: &mut Bucket,
    batch_size: usize,
) -> Result<Vec<BatchItem>, TrainError> {
    let mut batch: Vec<BatchItem> = (0..batch_size.min(bucket.items.len()))
        .map(|_| bucket.next_item())
        .collect();
    let mut extra = 0usize;
    while batch.iter().map(|b| b.video_id.as_str()).collect::<std::collections::BTreeSet<_>>().len() < 2
    {
        if extra >= bucket.items.len() {
            return Err(ModelError::InsufficientNegatives(1).into());
        }
        batch.push(bucket.next_item());
        extra += 1;
    }
    Ok(batch)
}

/// Run (or resume) the training loop.
///
/// `on_epoch_end` receives the state after every epoch; the CLI uses it to
/// write checkpoints. The returned curve covers the epochs executed in this
/// call.
pub fn train_loop(
    corpus: &CorpusIndex,
    queries: &[PseudoQuery],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch_end: impl FnMut(&TrainState) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let audit_before = firewall::annotation_read_count_thread();
    let data = prepare_train_data(corpus, queries, model_cfg, cfg)?;

    let need_visual = matches!(
        cfg.modality_mix,
        ModalityMix::AlternateUniform | ModalityMix::VisualOnly | ModalityMix::MixedConcat
    );
    let need_textual = matches!(
        cfg.modality_mix,
        ModalityMix::AlternateUniform | ModalityMix::TextualOnly | ModalityMix::MixedConcat
    );
    if need_visual && data.visual.is_empty() {
        return Err(TrainError::EmptyModality("visual".into()));
    }
    if need_textual && data.textual.is_empty() {
        return Err(TrainError::EmptyModality("textual".into()));
    }

    let mut state = resume.unwrap_or_else(|| TrainState::init(model_cfg));
    let mut curve = Vec::new();

    for epoch in state.completed_epochs..cfg.epochs {
        let mut erng = epoch_rng(cfg, epoch);
        let (mut visual_bucket, mut textual_bucket, mut mixed_bucket) = match cfg.modality_mix {
            ModalityMix::MixedConcat => {
                let mut all = data.visual.clone();
                all.extend(data.textual.iter().cloned());
                (
                    Bucket::new(Vec::new()),
                    Bucket::new(Vec::new()),
                    Bucket::new(all),
                )
            }
            _ => (
                Bucket::new(data.visual.clone()),
                Bucket::new(data.textual.clone()),
                Bucket::new(Vec::new()),
            ),
        };
        let steps = match cfg.modality_mix {
            ModalityMix::AlternateUniform => {
                div_ceil(data.visual.len().max(data.textual.len()), cfg.batch_size)
            }
            ModalityMix::VisualOnly => div_ceil(data.visual.len(), cfg.batch_size),
            ModalityMix::TextualOnly => div_ceil(data.textual.len(), cfg.batch_size),
            ModalityMix::MixedConcat => {
                div_ceil(data.visual.len() + data.textual.len(), cfg.batch_size)
            }
        }
        .max(1);
        // RNG consumption order is fixed: modality draws first, then the
        // per-bucket shuffles, then any per-sample draws during assembly.
        let step_modalities: Vec<Option<Modality>> = (0..steps)
            .map(|_| match cfg.modality_mix {
                ModalityMix::AlternateUniform if !cfg.per_sample_modality => {
                    Some(select_modality(&mut erng))
                }
                _ => None,
            })
            .collect();
        if !visual_bucket.items.is_empty() {
            visual_bucket.reshuffle(&mut erng);
        }
        if !textual_bucket.items.is_empty() {
            textual_bucket.reshuffle(&mut erng);
        }
        if !mixed_bucket.items.is_empty() {
            mixed_bucket.reshuffle(&mut erng);
        }

        for (step_in_epoch, step_modality) in step_modalities.iter().enumerate() {
            let (batch, label) = match cfg.modality_mix {
                ModalityMix::VisualOnly => {
                    (assemble_batch(&mut visual_bucket, cfg.batch_size)?, "visual")
                }
                ModalityMix::TextualOnly => (
                    assemble_batch(&mut textual_bucket, cfg.batch_size)?,
                    "textual",
                ),
                ModalityMix::MixedConcat => {
                    (assemble_batch(&mut mixed_bucket, cfg.batch_size)?, "mixed")
                }
                ModalityMix::AlternateUniform => {
                    if cfg.per_sample_modality {
                        let mut batch = Vec::with_capacity(cfg.batch_size);
                        for _ in 0..cfg.batch_size {
                            let bucket = match select_modality(&mut erng) {
                                Modality::Visual => &mut visual_bucket,
                                _ => &mut textual_bucket,
                            };
                            batch.push(bucket.next_item());
                        }
                        let mut extra = 0;
                        while batch
                            .iter()
                            .map(|b| b.video_id.as_str())
                            .collect::<std::collections::BTreeSet<_>>()
                            .len()
                            < 2
                        {
                            if extra >= data.visual.len() + data.textual.len() {
                                return Err(ModelError::InsufficientNegatives(1).into());
                            }
                            batch.push(visual_bucket.next_item());
                            extra += 1;
                        }
                        (batch, "mixed")
                    } else {
                        match step_modality.expect("per-step draw present") {
                            Modality::Visual => {
                                (assemble_batch(&mut visual_bucket, cfg.batch_size)?, "visual")
                            }
                            _ => (
                                assemble_batch(&mut textual_bucket, cfg.batch_size)?,
                                "textual",
                            ),
                        }
                    }
                }
            };
            let _ = step_in_epoch;
            let comps = train_step(&batch, &data.videos, model_cfg, cfg, &mut state)?;
            curve.push(CurveRow {
                step: state.global_step,
                epoch,
                modality: label.to_string(),
                l_vr: comps.l_vr,
                l_vmr: comps.l_vmr,
                l_vcl: comps.l_vcl,
                l_fcl: comps.l_fcl,
                total: comps.total,
            });
        }
        state.completed_epochs = epoch + 1;
        on_epoch_end(&state)?;
    }

    let audit_after = firewall::annotation_read_count_thread();
    if audit_after != audit_before {
        return Err(TrainError::AnnotationFirewall(audit_after - audit_before));
    }
    Ok(TrainOutcome { state, curve })
}

fn epoch_rng(cfg: &TrainConfig, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch_{epoch}")))
}

const CKPT_MAGIC: &[u8] = b"MPGN-CKPT-1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: u32,
    cols: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    step: u64,
    adam_t: u64,
    /// RNG the next epoch will consume; derived from (seed, epoch).
    rng_state: ChaCha8Rng,
    tensors: Vec<TensorMeta>,
}

/// On-disk training snapshot: JSON header plus raw little-endian f64 tensor
/// blobs for parameters and optimizer moments.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig, state: TrainState) -> Self {
        Checkpoint {
            model_config,
            train_config,
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let err = |reason: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let named = self.state.params.flatten();
        let mut tensors: Vec<(String, &Matrix)> = named;
        for (i, m) in self.state.opt.m.iter().enumerate() {
            tensors.push((format!("adam_m.{i}"), m));
        }
        for (i, v) in self.state.opt.v.iter().enumerate() {
            tensors.push((format!("adam_v.{i}"), v));
        }
        let header = CheckpointHeader {
            version: "MPGN-CKPT-1".to_string(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.state.completed_epochs,
            step: self.state.global_step,
            adam_t: self.state.opt.t,
            rng_state: epoch_rng(&self.train_config, self.state.completed_epochs),
            tensors: tensors
                .iter()
                .map(|(name, m)| TensorMeta {
                    name: name.clone(),
                    rows: m.rows as u32,
                    cols: m.cols as u32,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, m) in &tensors {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let err = |reason: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < CKPT_MAGIC.len() + 4 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let mut offset = CKPT_MAGIC.len();
        let header_len =
            u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        offset += 4;
        if bytes.len() < offset + header_len {
            return Err(err("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[offset..offset + header_len])
            .map_err(|e| err(e.to_string()))?;
        offset += header_len;
        if header.version != "MPGN-CKPT-1" {
            return Err(err(format!("unsupported version {:?}", header.version)));
        }
        let mut read_tensor = |meta: &TensorMeta| -> Result<Matrix, TrainError> {
            let n = meta.rows as usize * meta.cols as usize;
            if bytes.len() < offset + n * 8 {
                return Err(err(format!("truncated tensor {}", meta.name)));
            }
            let data: Vec<f64> = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n * 8;
            Ok(Matrix::from_vec(meta.rows as usize, meta.cols as usize, data))
        };
        // Rebuild the parameter tree by overwriting an init-shaped template
        // in visit order.
        let mut params = ModelParams::init(&header.model_config);
        let param_count = params.flatten().len();
        if header.tensors.len() != param_count * 3 {
            return Err(err(format!(
                "expected {} tensors, header lists {}",
                param_count * 3,
                header.tensors.len()
            )));
        }
        let mut loaded: Vec<Matrix> = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            loaded.push(read_tensor(meta)?);
        }
        let expected_names: Vec<String> =
            params.flatten().into_iter().map(|(n, _)| n).collect();
        for (meta, name) in header.tensors.iter().zip(&expected_names) {
            if &meta.name != name {
                return Err(err(format!(
                    "tensor order mismatch: {} vs {}",
                    meta.name, name
                )));
            }
        }
        let mut it = loaded.into_iter();
        params.for_each_mut(&mut |slot| {
            *slot = it.next().expect("tensor count checked");
        });
        let m: Vec<Matrix> = (&mut it).take(param_count).collect();
        let v: Vec<Matrix> = (&mut it).take(param_count).collect();
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            state: TrainState {
                params,
                opt: AdamState {
                    m,
                    v,
                    t: header.adam_t,
                },
                completed_epochs: header.epoch,
                global_step: header.step,
            },
        })
    }
}
