//! Dual-stream video-language model.
//!
//! Videos are encoded per stream (visual, subtitle) with a linear projection,
//! learned positional embeddings and self-attention blocks; the streams are
//! fused per step as `proj(concat(u, v, u+v, u*v))`. Queries hash to token
//! features, pass through attention blocks and two learned pooling heads that
//! yield a visual-facing and a subtitle-facing vector. Localization heads are
//! two stacked same-padded 1D convolutions producing start/end distributions
//! over time.
//!
//! Training minimizes `λ1·L_vr + λ2·L_vmr + λ3·L_vcl + λ4·L_fcl`: a hinge
//! video-retrieval loss over in-batch negatives, start/end cross-entropy,
//! symmetric InfoNCE between queries and pooled videos, and InfoNCE pulling
//! in-moment frames toward the query.

pub mod graph;
pub mod params;
pub mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VideoRecord;
use crate::util::stable_hash64;
use graph::{Gradients, Graph, NodeId};
use params::{Block, ConvStack, Linear, ModelParams, Stream};
use tensor::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("empty query text")]
    EmptyQuery,
    #[error("sequence length {t} exceeds positional table size {max}")]
    SequenceTooLong { t: usize, max: usize },
    #[error("batch needs at least 2 distinct videos for in-batch negatives, got {0}")]
    InsufficientNegatives(usize),
    #[error("unknown video {0:?} in batch")]
    UnknownVideo(String),
    #[error("moment steps [{ts}, {te}] invalid for {t} feature steps")]
    BadSteps { ts: usize, te: usize, t: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub video_blocks: usize,
    pub query_blocks: usize,
    /// Kernel width of the localization convolutions; odd.
    pub conv_kernel: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Hinge margin for the retrieval loss.
    pub margin: f64,
    /// Weights for (vr, vmr, vcl, fcl).
    pub loss_weights: [f64; 4],
    /// Longest predictable moment, in feature steps.
    pub max_moment_steps: usize,
    /// Positional-table size; videos longer than this are rejected.
    pub max_time_steps: usize,
    pub visual_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtitle_dim: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 128,
            n_heads: 4,
            video_blocks: 3,
            query_blocks: 2,
            conv_kernel: 5,
            temperature: 0.07,
            margin: 0.1,
            loss_weights: [1.0; 4],
            max_moment_steps: 16,
            max_time_steps: 256,
            visual_dim: 32,
            subtitle_dim: Some(32),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.loss_weights.iter().any(|w| *w < 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive".into());
        }
        if self.max_moment_steps == 0 || self.max_time_steps == 0 {
            return fail("step limits must be positive".into());
        }
        if self.visual_dim == 0 {
            return fail("visual_dim must be positive".into());
        }
        Ok(())
    }
}

const HASH_PROBES: usize = 4;

/// Hash a sentence into per-token feature rows: each lowercased word scatters
/// four signed unit spikes into a `hidden`-dim row, which is then
/// L2-normalized. Deterministic across runs and platforms.
pub fn embed_query_text(text: &str, hidden: usize) -> Result<Matrix, ModelError> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(ModelError::EmptyQuery);
    }
    let mut m = Matrix::zeros(tokens.len(), hidden);
    for (r, tok) in tokens.iter().enumerate() {
        let row = m.row_mut(r);
        for probe in 0..HASH_PROBES {
            let h = stable_hash64(format!("{probe}\u{1}{tok}").as_bytes());
            let idx = ((h >> 1) % hidden as u64) as usize;
            let sign = if h & 1 == 1 { 1.0 } else { -1.0 };
            row[idx] += sign;
        }
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        } else {
            row[(stable_hash64(tok.as_bytes()) % hidden as u64) as usize] = 1.0;
        }
    }
    Ok(m)
}

fn linear_g(g: &mut Graph, p: &Linear<NodeId>, x: NodeId) -> NodeId {
    let mm = g.matmul(x, p.w);
    g.add_row_broadcast(mm, p.b)
}

fn transformer_block_g(g: &mut Graph, p: &Block<NodeId>, x: NodeId, head_dim: usize) -> NodeId {
    let mut head_outs = Vec::with_capacity(p.heads.len());
    let scale = 1.0 / (head_dim as f64).sqrt();
    for head in &p.heads {
        let q = g.matmul(x, head.wq);
        let k = g.matmul(x, head.wk);
        let v = g.matmul(x, head.wv);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled);
        head_outs.push(g.matmul(attn, v));
    }
    let concat = g.concat_cols(&head_outs);
    let proj = linear_g(g, &p.attn_out, concat);
    let res1 = g.add(x, proj);
    let norm1 = g.layer_norm_rows(res1, p.ln1.gamma, p.ln1.beta);
    let ff1 = linear_g(g, &p.ffn1, norm1);
    let ff1 = g.relu(ff1);
    let ff2 = linear_g(g, &p.ffn2, ff1);
    let res2 = g.add(norm1, ff2);
    g.layer_norm_rows(res2, p.ln2.gamma, p.ln2.beta)
}

fn encode_stream_g(
    g: &mut Graph,
    p: &Stream<NodeId>,
    cfg: &ModelConfig,
    input: NodeId,
) -> Result<NodeId, ModelError> {
    let t = g.val(input).rows;
    if t > cfg.max_time_steps {
        return Err(ModelError::SequenceTooLong {
            t,
            max: cfg.max_time_steps,
        });
    }
    let projected = linear_g(g, &p.proj, input);
    let pos = g.slice_rows(p.pos, 0, t);
    let mut x = g.add(projected, pos);
    let dh = cfg.hidden_dim / cfg.n_heads;
    for block in &p.blocks {
        x = transformer_block_g(g, block, x, dh);
    }
    Ok(x)
}

/// Graph-side video encoding: per-stream contexts, fused context and pooled
/// vectors (L2-normalized where used for cosine scoring).
pub struct VideoNodes {
    pub t_steps: usize,
    pub visual_ctx: NodeId,
    pub subtitle_ctx: Option<NodeId>,
    pub fused_ctx: NodeId,
    pub pooled_fused: NodeId,
    pub pooled_fused_norm: NodeId,
    pub pooled_visual_norm: NodeId,
    pub pooled_subtitle_norm: Option<NodeId>,
}

pub fn encode_video_g(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    visual: &Matrix,
    subtitle: Option<&Matrix>,
) -> Result<VideoNodes, ModelError> {
    let t = visual.rows;
    let vis_in = g.constant(visual.clone());
    let u = encode_stream_g(g, &p.visual, cfg, vis_in)?;
    let v_ctx = match (subtitle, &p.subtitle) {
        (Some(sub), Some(sp)) => {
            assert_eq!(sub.rows, t, "stream row mismatch");
            let sub_in = g.constant(sub.clone());
            Some(encode_stream_g(g, sp, cfg, sub_in)?)
        }
        _ => None,
    };
    let v_or_zero = v_ctx.unwrap_or_else(|| g.constant(Matrix::zeros(t, cfg.hidden_dim)));
    let sum = g.add(u, v_or_zero);
    let prod = g.mul_elem(u, v_or_zero);
    let cat = g.concat_cols(&[u, v_or_zero, sum, prod]);
    let fused = linear_g(g, &p.fusion, cat);
    let pooled_fused = g.max_over_rows(fused);
    let pooled_fused_norm = g.l2_normalize_rows(pooled_fused);
    let pooled_visual = g.max_over_rows(u);
    let pooled_visual_norm = g.l2_normalize_rows(pooled_visual);
    let pooled_subtitle_norm = v_ctx.map(|v| {
        let pooled = g.max_over_rows(v);
        g.l2_normalize_rows(pooled)
    });
    Ok(VideoNodes {
        t_steps: t,
        visual_ctx: u,
        subtitle_ctx: v_ctx,
        fused_ctx: fused,
        pooled_fused,
        pooled_fused_norm,
        pooled_visual_norm,
        pooled_subtitle_norm,
    })
}

/// Graph-side query encoding: two unit-norm modality-facing vectors.
pub struct QueryNodes {
    pub q_visual: NodeId,
    pub q_subtitle: NodeId,
}

pub fn encode_query_g(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    tokens: &Matrix,
) -> Result<QueryNodes, ModelError> {
    let n = tokens.rows;
    if n > cfg.max_time_steps {
        return Err(ModelError::SequenceTooLong {
            t: n,
            max: cfg.max_time_steps,
        });
    }
    let tok_in = g.constant(tokens.clone());
    let projected = linear_g(g, &p.query.proj, tok_in);
    let projected = g.relu(projected);
    let pos = g.slice_rows(p.query.pos, 0, n);
    let mut x = g.add(projected, pos);
    let dh = cfg.hidden_dim / cfg.n_heads;
    for block in &p.query.blocks {
        x = transformer_block_g(g, block, x, dh);
    }
    let pool = |g: &mut Graph, w: NodeId| {
        let scores = g.matmul(x, w);
        let scores_t = g.transpose(scores);
        let attn = g.softmax_rows(scores_t);
        let pooled = g.matmul(attn, x);
        g.l2_normalize_rows(pooled)
    };
    let q_visual = pool(g, p.query.pool_visual);
    let q_subtitle = pool(g, p.query.pool_subtitle);
    Ok(QueryNodes {
        q_visual,
        q_subtitle,
    })
}

fn conv_stack_g(g: &mut Graph, p: &ConvStack<NodeId>, x: NodeId, kernel: usize) -> NodeId {
    let c1 = g.conv1d_same(x, p.w1, p.b1, kernel);
    let c1 = g.relu(c1);
    let logits = g.conv1d_same(c1, p.w2, p.b2, kernel);
    let logits_t = g.transpose(logits);
    g.softmax_rows(logits_t)
}

/// Start/end distributions over time for one (query, video) pair.
pub fn localize_g(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    video: &VideoNodes,
    query: &QueryNodes,
) -> (NodeId, NodeId) {
    let q_sum = g.add(query.q_visual, query.q_subtitle);
    let interaction = g.mul_row_broadcast(video.fused_ctx, q_sum);
    let p_start = conv_stack_g(g, &p.start_head, interaction, cfg.conv_kernel);
    let p_end = conv_stack_g(g, &p.end_head, interaction, cfg.conv_kernel);
    (p_start, p_end)
}

/// Video-level relevance: mean cosine of the modality-facing query vectors
/// with the per-stream pooled contexts. The subtitle term drops out (weight
/// renormalized) when the video has no subtitle features.
pub fn score_video_g(g: &mut Graph, query: &QueryNodes, video: &VideoNodes) -> NodeId {
    let pv_t = g.transpose(video.pooled_visual_norm);
    let sv = g.matmul(query.q_visual, pv_t);
    match video.pooled_subtitle_norm {
        Some(ps) => {
            let ps_t = g.transpose(ps);
            let ss = g.matmul(query.q_subtitle, ps_t);
            let sum = g.add(sv, ss);
            g.scale(sum, 0.5)
        }
        None => sv,
    }
}

/// Value-side video encoding extracted from a forward pass.
#[derive(Debug, Clone)]
pub struct VideoEncoding {
    pub video_id: String,
    pub visual_ctx: Matrix,
    pub subtitle_ctx: Option<Matrix>,
    pub fused_ctx: Matrix,
    /// Max over time of the fused context.
    pub pooled: Matrix,
    pub pooled_visual_norm: Matrix,
    pub pooled_subtitle_norm: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct QueryEncoding {
    pub q_visual: Matrix,
    pub q_subtitle: Matrix,
}

#[derive(Debug, Clone)]
pub struct LocalizationScores {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

/// Insert parameters into a graph as trainable leaves.
pub fn params_to_graph(g: &mut Graph, params: &ModelParams<Matrix>) -> ModelParams<NodeId> {
    params.map(&mut |m| g.param(m.clone()))
}

/// Insert parameters as constants (inference; no gradient bookkeeping).
pub fn params_to_graph_frozen(g: &mut Graph, params: &ModelParams<Matrix>) -> ModelParams<NodeId> {
    params.map(&mut |m| g.constant(m.clone()))
}

/// Encode one video with frozen parameters.
pub fn encode_video(
    record: &VideoRecord,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
) -> Result<VideoEncoding, ModelError> {
    let mut g = Graph::new();
    let pn = params_to_graph_frozen(&mut g, params);
    let visual = Matrix::from_features(&record.visual);
    let subtitle = record.subtitle_features.as_ref().map(Matrix::from_features);
    let nodes = encode_video_g(&mut g, &pn, cfg, &visual, subtitle.as_ref())?;
    Ok(VideoEncoding {
        video_id: record.video_id.clone(),
        visual_ctx: g.val(nodes.visual_ctx).clone(),
        subtitle_ctx: nodes.subtitle_ctx.map(|id| g.val(id).clone()),
        fused_ctx: g.val(nodes.fused_ctx).clone(),
        pooled: g.val(nodes.pooled_fused).clone(),
        pooled_visual_norm: g.val(nodes.pooled_visual_norm).clone(),
        pooled_subtitle_norm: nodes.pooled_subtitle_norm.map(|id| g.val(id).clone()),
    })
}

/// Encode one query with frozen parameters.
pub fn encode_query(
    text: &str,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
) -> Result<QueryEncoding, ModelError> {
    let tokens = embed_query_text(text, cfg.hidden_dim)?;
    let mut g = Graph::new();
    let pn = params_to_graph_frozen(&mut g, params);
    let nodes = encode_query_g(&mut g, &pn, cfg, &tokens)?;
    Ok(QueryEncoding {
        q_visual: g.val(nodes.q_visual).clone(),
        q_subtitle: g.val(nodes.q_subtitle).clone(),
    })
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Value-side video score; mirrors [`score_video_g`].
pub fn score_video(query: &QueryEncoding, video: &VideoEncoding) -> f64 {
    let sv = dot(&query.q_visual, &video.pooled_visual_norm);
    match &video.pooled_subtitle_norm {
        Some(ps) => 0.5 * (sv + dot(&query.q_subtitle, ps)),
        None => sv,
    }
}

/// Value-side localization over a cached video encoding.
pub fn localize(
    query: &QueryEncoding,
    video: &VideoEncoding,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
) -> LocalizationScores {
    let mut g = Graph::new();
    let start_head = ConvStack {
        w1: g.constant(params.start_head.w1.clone()),
        b1: g.constant(params.start_head.b1.clone()),
        w2: g.constant(params.start_head.w2.clone()),
        b2: g.constant(params.start_head.b2.clone()),
    };
    let end_head = ConvStack {
        w1: g.constant(params.end_head.w1.clone()),
        b1: g.constant(params.end_head.b1.clone()),
        w2: g.constant(params.end_head.w2.clone()),
        b2: g.constant(params.end_head.b2.clone()),
    };
    let fused = g.constant(video.fused_ctx.clone());
    let qv = g.constant(query.q_visual.clone());
    let qs = g.constant(query.q_subtitle.clone());
    let q_sum = g.add(qv, qs);
    let interaction = g.mul_row_broadcast(fused, q_sum);
    let start = conv_stack_g(&mut g, &start_head, interaction, cfg.conv_kernel);
    let end = conv_stack_g(&mut g, &end_head, interaction, cfg.conv_kernel);
    LocalizationScores {
        p_start: g.val(start).row(0).to_vec(),
        p_end: g.val(end).row(0).to_vec(),
    }
}

/// One training sample: a query bound to its video and ground-truth steps.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub query_text: String,
    pub video_id: String,
    pub t_start: usize,
    pub t_end: usize,
}

/// Feature matrices for the videos a batch references.
#[derive(Debug, Clone)]
pub struct VideoInputs {
    pub visual: Matrix,
    pub subtitle: Option<Matrix>,
}

impl VideoInputs {
    pub fn from_record(record: &VideoRecord) -> Self {
        VideoInputs {
            visual: Matrix::from_features(&record.visual),
            subtitle: record.subtitle_features.as_ref().map(Matrix::from_features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_vr: f64,
    pub l_vmr: f64,
    pub l_vcl: f64,
    pub l_fcl: f64,
    pub total: f64,
}

struct LossNodes {
    l_vr: NodeId,
    l_vmr: NodeId,
    l_vcl: NodeId,
    l_fcl: NodeId,
    total: NodeId,
}

const MASK_NEG: f64 = -1e9;

/// Build the four-component loss over a batch. Every distinct video is
/// encoded once and shared by its queries.
fn loss_g(
    g: &mut Graph,
    pn: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    items: &[BatchItem],
    videos: &BTreeMap<String, VideoInputs>,
) -> Result<LossNodes, ModelError> {
    let b = items.len();
    let mut distinct: Vec<&str> = Vec::new();
    for item in items {
        if !distinct.contains(&item.video_id.as_str()) {
            distinct.push(&item.video_id);
        }
    }
    if distinct.len() < 2 {
        return Err(ModelError::InsufficientNegatives(distinct.len()));
    }

    let mut video_nodes: BTreeMap<&str, VideoNodes> = BTreeMap::new();
    for vid in &distinct {
        let inputs = videos
            .get(*vid)
            .ok_or_else(|| ModelError::UnknownVideo(vid.to_string()))?;
        let nodes = encode_video_g(g, pn, cfg, &inputs.visual, inputs.subtitle.as_ref())?;
        video_nodes.insert(vid, nodes);
    }

    let mut q_visual_rows = Vec::with_capacity(b);
    let mut q_subtitle_rows = Vec::with_capacity(b);
    let mut q_combined_rows = Vec::with_capacity(b);
    let mut vmr_terms = Vec::with_capacity(b);
    let mut fcl_terms = Vec::with_capacity(b);
    for item in items {
        let vn = &video_nodes[item.video_id.as_str()];
        if item.t_start > item.t_end || item.t_end >= vn.t_steps {
            return Err(ModelError::BadSteps {
                ts: item.t_start,
                te: item.t_end,
                t: vn.t_steps,
            });
        }
        let tokens = embed_query_text(&item.query_text, cfg.hidden_dim)?;
        let qn = encode_query_g(g, pn, cfg, &tokens)?;
        let (p_start, p_end) = localize_g(g, pn, cfg, vn, &qn);

        let s_pick = g.select_entries(p_start, vec![(0, item.t_start)]);
        let e_pick = g.select_entries(p_end, vec![(0, item.t_end)]);
        let s_log = g.log(s_pick);
        let e_log = g.log(e_pick);
        let nll = g.add(s_log, e_log);
        vmr_terms.push(g.neg(nll));

        let q_combined = g.add(qn.q_visual, qn.q_subtitle);
        let q_combined = g.l2_normalize_rows(q_combined);

        // Frame contrastive term over this item's own video.
        let frames_norm = g.l2_normalize_rows(vn.fused_ctx);
        let qc_t = g.transpose(q_combined);
        let frame_sims = g.matmul(frames_norm, qc_t);
        let frame_sims = g.scale(frame_sims, 1.0 / cfg.temperature);
        let sims_t = g.transpose(frame_sims);
        let lse = g.logsumexp_rows(sims_t);
        let positives = g.select_entries(
            frame_sims,
            (item.t_start..=item.t_end).map(|t| (t, 0)).collect(),
        );
        let mean_pos = g.mean_all(positives);
        fcl_terms.push(g.sub(lse, mean_pos));

        q_visual_rows.push(qn.q_visual);
        q_subtitle_rows.push(qn.q_subtitle);
        q_combined_rows.push(q_combined);
    }

    let l_vmr = {
        let stacked = g.concat_rows(&vmr_terms);
        g.mean_all(stacked)
    };
    let l_fcl = {
        let stacked = g.concat_rows(&fcl_terms);
        g.mean_all(stacked)
    };

    // Per-item pooled video rows (duplicated when items share a video).
    let vv_rows: Vec<NodeId> = items
        .iter()
        .map(|it| video_nodes[it.video_id.as_str()].pooled_visual_norm)
        .collect();
    let zero_row = g.constant(Matrix::zeros(1, cfg.hidden_dim));
    let vs_rows: Vec<NodeId> = items
        .iter()
        .map(|it| {
            video_nodes[it.video_id.as_str()]
                .pooled_subtitle_norm
                .unwrap_or(zero_row)
        })
        .collect();
    let vc_rows: Vec<NodeId> = items
        .iter()
        .map(|it| video_nodes[it.video_id.as_str()].pooled_fused_norm)
        .collect();

    let q_vis = g.concat_rows(&q_visual_rows);
    let q_sub = g.concat_rows(&q_subtitle_rows);
    let q_com = g.concat_rows(&q_combined_rows);
    let v_vis = g.concat_rows(&vv_rows);
    let v_sub = g.concat_rows(&vs_rows);
    let v_com = g.concat_rows(&vc_rows);

    // Score matrix S[i][j] = score of query i against video of item j, with
    // per-column stream weights so subtitle-less videos renormalize.
    let v_vis_t = g.transpose(v_vis);
    let v_sub_t = g.transpose(v_sub);
    let s_vis = g.matmul(q_vis, v_vis_t);
    let s_sub = g.matmul(q_sub, v_sub_t);
    let mut w_vis = Matrix::zeros(b, b);
    let mut w_sub = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let has_sub = video_nodes[items[j].video_id.as_str()]
                .pooled_subtitle_norm
                .is_some();
            w_vis.set(i, j, if has_sub { 0.5 } else { 1.0 });
            w_sub.set(i, j, if has_sub { 0.5 } else { 0.0 });
        }
    }
    let w_vis = g.constant(w_vis);
    let w_sub = g.constant(w_sub);
    let s_vis_w = g.mul_elem(s_vis, w_vis);
    let s_sub_w = g.mul_elem(s_sub, w_sub);
    let scores = g.add(s_vis_w, s_sub_w);

    // Pairs where both items reference the same video are neither positives
    // (off-diagonal) nor usable negatives.
    let mut allowed = Matrix::zeros(b, b);
    let mut n_pairs = 0usize;
    for i in 0..b {
        for j in 0..b {
            if items[i].video_id != items[j].video_id {
                allowed.set(i, j, 1.0);
                n_pairs += 1;
            }
        }
    }
    let diag_entries: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();

    // Hinge retrieval loss over negative videos and negative queries.
    let l_vr = {
        let diag = g.select_entries(scores, diag_entries.clone());
        let gap_v = g.sub_col_broadcast(scores, diag);
        let gap_v = g.add_scalar(gap_v, cfg.margin);
        let hinge_v = g.relu(gap_v);
        let allowed_n = g.constant(allowed.clone());
        let hinge_v = g.mul_elem(hinge_v, allowed_n);
        let sum_v = g.sum_all(hinge_v);

        let scores_t = g.transpose(scores);
        let gap_q = g.sub_col_broadcast(scores_t, diag);
        let gap_q = g.add_scalar(gap_q, cfg.margin);
        let hinge_q = g.relu(gap_q);
        let hinge_q = g.mul_elem(hinge_q, allowed_n);
        let sum_q = g.sum_all(hinge_q);

        let total = g.add(sum_v, sum_q);
        g.scale(total, 1.0 / (2 * n_pairs) as f64)
    };

    // Symmetric InfoNCE between combined query vectors and pooled videos.
    let l_vcl = {
        let v_com_t = g.transpose(v_com);
        let sims = g.matmul(q_com, v_com_t);
        let sims = g.scale(sims, 1.0 / cfg.temperature);
        // Same-video off-diagonal entries are excluded from denominators.
        let mut mask = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                if i != j && items[i].video_id == items[j].video_id {
                    mask.set(i, j, MASK_NEG);
                }
            }
        }
        let mask = g.constant(mask);
        let diag = g.select_entries(sims, diag_entries);
        let masked = g.add(sims, mask);
        let lse_rows = g.logsumexp_rows(masked);
        let row_terms = g.sub(lse_rows, diag);
        let row_loss = g.mean_all(row_terms);
        let masked_t = g.transpose(masked);
        let lse_cols = g.logsumexp_rows(masked_t);
        let col_terms = g.sub(lse_cols, diag);
        let col_loss = g.mean_all(col_terms);
        let sum = g.add(row_loss, col_loss);
        g.scale(sum, 0.5)
    };

    let [w1, w2, w3, w4] = cfg.loss_weights;
    let t1 = g.scale(l_vr, w1);
    let t2 = g.scale(l_vmr, w2);
    let t3 = g.scale(l_vcl, w3);
    let t4 = g.scale(l_fcl, w4);
    let t12 = g.add(t1, t2);
    let t34 = g.add(t3, t4);
    let total = g.add(t12, t34);

    Ok(LossNodes {
        l_vr,
        l_vmr,
        l_vcl,
        l_fcl,
        total,
    })
}

/// Forward-only loss evaluation.
pub fn loss_total(
    items: &[BatchItem],
    videos: &BTreeMap<String, VideoInputs>,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
) -> Result<LossComponents, ModelError> {
    let mut g = Graph::new();
    let pn = params_to_graph_frozen(&mut g, params);
    let nodes = loss_g(&mut g, &pn, cfg, items, videos)?;
    Ok(components(&g, &nodes))
}

fn components(g: &Graph, nodes: &LossNodes) -> LossComponents {
    LossComponents {
        l_vr: g.val(nodes.l_vr).item(),
        l_vmr: g.val(nodes.l_vmr).item(),
        l_vcl: g.val(nodes.l_vcl).item(),
        l_fcl: g.val(nodes.l_fcl).item(),
        total: g.val(nodes.total).item(),
    }
}

/// Loss plus parameter gradients for one batch.
pub fn loss_and_grads(
    items: &[BatchItem],
    videos: &BTreeMap<String, VideoInputs>,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
) -> Result<(LossComponents, ModelParams<Matrix>), ModelError> {
    let mut g = Graph::new();
    let pn = params_to_graph(&mut g, params);
    let nodes = loss_g(&mut g, &pn, cfg, items, videos)?;
    let comps = components(&g, &nodes);
    let grads: Gradients = g.backward(nodes.total);
    let shapes: Vec<(usize, usize)> = params.flatten().iter().map(|(_, m)| m.shape()).collect();
    let mut idx = 0usize;
    let grad_tree = pn.map(&mut |&id| {
        let (rows, cols) = shapes[idx];
        idx += 1;
        grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    });
    Ok((comps, grad_tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synth_corpus, SynthConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            video_blocks: 2,
            query_blocks: 1,
            conv_kernel: 3,
            max_time_steps: 64,
            visual_dim: 6,
            subtitle_dim: Some(6),
            ..ModelConfig::default()
        }
    }

    fn rand_inputs(seed: u64, t: usize, d: usize, scale: f64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            t,
            d,
            (0..t * d).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
    }

    #[test]
    fn embedding_is_deterministic_and_orderless_per_token() {
        let a = embed_query_text("The Cat sat", 32).unwrap();
        let b = embed_query_text("the cat sat", 32).unwrap();
        assert_eq!(a, b);
        let ab = embed_query_text("a b", 32).unwrap();
        let ba = embed_query_text("b a", 32).unwrap();
        assert_eq!(ab.row(0), ba.row(1));
        assert_eq!(ab.row(1), ba.row(0));
        assert_ne!(ab.row(0), ab.row(1));
        for r in 0..ab.rows {
            let norm: f64 = ab.row(r).iter().map(|v| v * v).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            embed_query_text("  ...  ", 32),
            Err(ModelError::EmptyQuery)
        ));
    }

    #[test]
    fn query_encodings_are_unit_norm_and_distinct() {
        let cfg = tiny_cfg();
        for seed in 0..20 {
            let params = ModelParams::init(&ModelConfig { seed, ..tiny_cfg() });
            let q = encode_query("victor talks about baren", &cfg, &params).unwrap();
            let nv: f64 = q.q_visual.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ns: f64 = q.q_subtitle.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nv - 1.0).abs() < 1e-9);
            assert!((ns - 1.0).abs() < 1e-9);
            assert_ne!(q.q_visual, q.q_subtitle);
        }
    }

    #[test]
    fn identical_text_encodes_identically() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let a = encode_query("hello there world", &cfg, &params).unwrap();
        let b = encode_query("hello there world", &cfg, &params).unwrap();
        assert_eq!(a.q_visual, b.q_visual);
        assert_eq!(a.q_subtitle, b.q_subtitle);
    }

    #[test]
    fn permuting_feature_rows_changes_encoding() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let mut g = Graph::new();
        let pn = params_to_graph_frozen(&mut g, &params);
        let x = rand_inputs(1, 8, 6, 1.0);
        let mut permuted = x.clone();
        let row0: Vec<f64> = permuted.row(0).to_vec();
        let row7: Vec<f64> = permuted.row(7).to_vec();
        permuted.row_mut(0).copy_from_slice(&row7);
        permuted.row_mut(7).copy_from_slice(&row0);
        let a = encode_video_g(&mut g, &pn, &cfg, &x, None).unwrap();
        let b = encode_video_g(&mut g, &pn, &cfg, &permuted, None).unwrap();
        assert_ne!(g.val(a.fused_ctx), g.val(b.fused_ctx));
    }

    #[test]
    fn encoder_is_finite_under_large_inputs() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let mut g = Graph::new();
        let pn = params_to_graph_frozen(&mut g, &params);
        let x = rand_inputs(2, 10, 6, 1000.0);
        let sub = rand_inputs(3, 10, 6, 1000.0);
        let nodes = encode_video_g(&mut g, &pn, &cfg, &x, Some(&sub)).unwrap();
        assert!(g.val(nodes.fused_ctx).all_finite());
        assert!(g.val(nodes.pooled_fused).all_finite());
    }

    #[test]
    fn sequence_longer_than_positional_table_errors() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let mut g = Graph::new();
        let pn = params_to_graph_frozen(&mut g, &params);
        let x = rand_inputs(4, 65, 6, 1.0);
        assert!(matches!(
            encode_video_g(&mut g, &pn, &cfg, &x, None),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn score_video_bounds_and_extremes() {
        let h = 4;
        let unit = |d: usize| {
            let mut m = Matrix::zeros(1, h);
            m.set(0, d, 1.0);
            m
        };
        let video = VideoEncoding {
            video_id: "v".into(),
            visual_ctx: Matrix::zeros(2, h),
            subtitle_ctx: None,
            fused_ctx: Matrix::zeros(2, h),
            pooled: Matrix::zeros(1, h),
            pooled_visual_norm: unit(0),
            pooled_subtitle_norm: Some(unit(1)),
        };
        let aligned = QueryEncoding {
            q_visual: unit(0),
            q_subtitle: unit(1),
        };
        assert!((score_video(&aligned, &video) - 1.0).abs() < 1e-12);
        let orthogonal = QueryEncoding {
            q_visual: unit(2),
            q_subtitle: unit(3),
        };
        assert_eq!(score_video(&orthogonal, &video), 0.0);
    }

    #[test]
    fn score_is_bounded_for_random_encodings() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let out = synth_corpus(&SynthConfig {
            n_videos: 2,
            feature_dims: 6,
            topic_vocab_size: 6,
            scenes_per_video: 3,
            cues_per_video: (6, 8),
            ..SynthConfig::default()
        })
        .unwrap();
        for rec in out.corpus.iter() {
            let enc = encode_video(rec, &cfg, &params).unwrap();
            for text in ["baren vinde", "some words about things"] {
                let q = encode_query(text, &cfg, &params).unwrap();
                let s = score_video(&q, &enc);
                assert!((-1.0..=1.0).contains(&s), "score {s} out of range");
            }
        }
    }

    #[test]
    fn localization_distributions_sum_to_one() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let video = VideoEncoding {
            video_id: "v".into(),
            visual_ctx: Matrix::zeros(9, 16),
            subtitle_ctx: None,
            fused_ctx: rand_inputs(5, 9, 16, 1.0),
            pooled: Matrix::zeros(1, 16),
            pooled_visual_norm: Matrix::zeros(1, 16),
            pooled_subtitle_norm: None,
        };
        let q = encode_query("anything at all", &cfg, &params).unwrap();
        let scores = localize(&q, &video, &cfg, &params);
        let s_sum: f64 = scores.p_start.iter().sum();
        let e_sum: f64 = scores.p_end.iter().sum();
        assert!((s_sum - 1.0).abs() < 1e-5);
        assert!((e_sum - 1.0).abs() < 1e-5);
        assert!(scores.p_start.iter().all(|p| *p >= 0.0));
        assert!(scores.p_end.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn uniform_interaction_gives_near_uniform_start() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        // Constant fused rows: away from conv boundary effects the logits
        // are constant, so interior probabilities match closely.
        let video = VideoEncoding {
            video_id: "v".into(),
            visual_ctx: Matrix::zeros(12, 16),
            subtitle_ctx: None,
            fused_ctx: Matrix::from_vec(12, 16, vec![0.5; 12 * 16]),
            pooled: Matrix::zeros(1, 16),
            pooled_visual_norm: Matrix::zeros(1, 16),
            pooled_subtitle_norm: None,
        };
        let q = encode_query("steady query", &cfg, &params).unwrap();
        let scores = localize(&q, &video, &cfg, &params);
        let interior = &scores.p_start[2..10];
        let first = interior[0];
        for p in interior {
            assert!(
                (p - first).abs() < 1e-9,
                "interior probs differ: {interior:?}"
            );
        }
    }

    #[test]
    fn loss_requires_two_distinct_videos() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let mut videos = BTreeMap::new();
        videos.insert(
            "a".to_string(),
            VideoInputs {
                visual: rand_inputs(1, 6, 6, 1.0),
                subtitle: None,
            },
        );
        let items = vec![
            BatchItem {
                query_text: "one".into(),
                video_id: "a".into(),
                t_start: 0,
                t_end: 2,
            },
            BatchItem {
                query_text: "two".into(),
                video_id: "a".into(),
                t_start: 1,
                t_end: 3,
            },
        ];
        assert!(matches!(
            loss_total(&items, &videos, &cfg, &params),
            Err(ModelError::InsufficientNegatives(1))
        ));
    }

    fn toy_batch(cfg: &ModelConfig) -> (Vec<BatchItem>, BTreeMap<String, VideoInputs>) {
        let mut videos = BTreeMap::new();
        videos.insert(
            "a".to_string(),
            VideoInputs {
                visual: rand_inputs(11, 8, cfg.visual_dim, 1.0),
                subtitle: Some(rand_inputs(12, 8, cfg.subtitle_dim.unwrap(), 1.0)),
            },
        );
        videos.insert(
            "b".to_string(),
            VideoInputs {
                visual: rand_inputs(13, 8, cfg.visual_dim, 1.0),
                subtitle: Some(rand_inputs(14, 8, cfg.subtitle_dim.unwrap(), 1.0)),
            },
        );
        let items = vec![
            BatchItem {
                query_text: "alpha words here".into(),
                video_id: "a".into(),
                t_start: 1,
                t_end: 3,
            },
            BatchItem {
                query_text: "beta phrase there".into(),
                video_id: "b".into(),
                t_start: 4,
                t_end: 6,
            },
        ];
        (items, videos)
    }

    #[test]
    fn loss_components_are_nonnegative_and_sum() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let (items, videos) = toy_batch(&cfg);
        let comps = loss_total(&items, &videos, &cfg, &params).unwrap();
        assert!(comps.l_vr >= 0.0);
        assert!(comps.l_vmr >= 0.0);
        assert!(comps.l_vcl >= 0.0);
        assert!(comps.l_fcl >= 0.0);
        let weighted = comps.l_vr + comps.l_vmr + comps.l_vcl + comps.l_fcl;
        assert!((comps.total - weighted).abs() < 1e-12);
    }

    #[test]
    fn zeroed_weights_keep_only_retrieval_signal() {
        let cfg = ModelConfig {
            loss_weights: [1.0, 0.0, 0.0, 0.0],
            ..tiny_cfg()
        };
        let params = ModelParams::init(&cfg);
        let (items, videos) = toy_batch(&cfg);
        let comps = loss_total(&items, &videos, &cfg, &params).unwrap();
        assert!((comps.total - comps.l_vr).abs() < 1e-12);
    }

    #[test]
    fn param_count_is_a_config_function() {
        let params = ModelParams::init(&tiny_cfg());
        assert_eq!(
            params.param_count(),
            ModelParams::init(&tiny_cfg()).param_count()
        );
    }
}
