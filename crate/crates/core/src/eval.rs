//! Inference over a corpus and retrieval metrics.
//!
//! Ranking first scores every video (cosine of query and pooled stream
//! contexts), then enumerates candidate spans `(t_s, t_e)` within the
//! shortlisted videos and scores each as
//! `video_score + ln(p_start[t_s] * p_end[t_e])`. Metrics are Recall@k under
//! a temporal-IoU threshold for three tasks: video retrieval (VR), single
//! video moment retrieval (SVMR) and video corpus moment retrieval (VCMR).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedQuery, CorpusIndex};
use crate::firewall::EvalScope;
use crate::model::params::ModelParams;
use crate::model::tensor::Matrix;
use crate::model::{
    encode_query, encode_video, localize, score_video, LocalizationScores, ModelConfig,
    ModelError, VideoEncoding,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query {query_id:?} references unknown video {video_id:?}")]
    UnknownVideo { query_id: String, video_id: String },
    #[error("AveR needs VCMR recall at k={0} and IoU=0.5")]
    MissingK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "VR")]
    Vr,
    #[serde(rename = "SVMR")]
    Svmr,
    #[serde(rename = "VCMR")]
    Vcmr,
}

/// Intersection over union of two closed time intervals; zero when disjoint
/// or degenerate.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let len_a = (a.1 - a.0).max(0.0);
    let len_b = (b.1 - b.0).max(0.0);
    let union = len_a + len_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPrediction {
    pub query_id: String,
    pub video_id: String,
    pub ts_s: f64,
    pub te_s: f64,
    pub score: f64,
}

/// Wire format for predictions JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub video_id: String,
    pub ts: f64,
    pub te: f64,
    pub score: f64,
}

impl MomentPrediction {
    pub fn to_record(&self) -> PredictionRecord {
        PredictionRecord {
            query_id: self.query_id.clone(),
            video_id: self.video_id.clone(),
            ts: self.ts_s,
            te: self.te_s,
            score: self.score,
        }
    }
}

/// Ground truth for one evaluation query, extracted under an [`EvalScope`].
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub video_id: String,
    pub ts_s: f64,
    pub te_s: f64,
}

/// Cached per-checkpoint video encodings.
pub struct CorpusEncodings {
    videos: BTreeMap<String, (VideoEncoding, f64)>,
}

impl CorpusEncodings {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

pub fn encode_corpus(
    corpus: &CorpusIndex,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
) -> Result<CorpusEncodings, EvalError> {
    let mut videos = BTreeMap::new();
    for record in corpus.iter() {
        let enc = encode_video(record, cfg, params)?;
        videos.insert(
            record.video_id.clone(),
            (enc, record.visual.stride_s as f64),
        );
    }
    Ok(CorpusEncodings { videos })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    pub top_k: usize,
    /// Number of best-scoring videos whose spans are enumerated; raise to
    /// corpus size for exhaustive ranking.
    pub video_shortlist: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            top_k: 100,
            video_shortlist: 100,
        }
    }
}

fn sort_predictions(preds: &mut [MomentPrediction]) {
    preds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are not NaN")
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.ts_s.partial_cmp(&b.ts_s).unwrap())
            .then_with(|| a.te_s.partial_cmp(&b.te_s).unwrap())
    });
}

fn enumerate_spans(
    query_id: &str,
    video_id: &str,
    video_score: f64,
    scores: &LocalizationScores,
    stride: f64,
    max_steps: usize,
    out: &mut Vec<MomentPrediction>,
) {
    let t = scores.p_start.len();
    for t_s in 0..t {
        let hi = (t_s + max_steps - 1).min(t - 1);
        for t_e in t_s..=hi {
            let moment_p = scores.p_start[t_s] * scores.p_end[t_e];
            out.push(MomentPrediction {
                query_id: query_id.to_string(),
                video_id: video_id.to_string(),
                ts_s: t_s as f64 * stride,
                te_s: (t_e + 1) as f64 * stride,
                score: video_score + moment_p.ln(),
            });
        }
    }
}

/// Rank candidate moments across the corpus for one query.
///
/// Also returns the full video ranking by video-level score (used for the
/// VR task), with deterministic id tie-breaks everywhere.
pub fn rank_moments(
    query_id: &str,
    query_text: &str,
    encodings: &CorpusEncodings,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
    opts: &RankOptions,
) -> Result<(Vec<MomentPrediction>, Vec<(String, f64)>), EvalError> {
    if encodings.videos.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let q = encode_query(query_text, cfg, params)?;
    let mut video_scores: Vec<(String, f64)> = encodings
        .videos
        .iter()
        .map(|(id, (enc, _))| (id.clone(), score_video(&q, enc)))
        .collect();
    video_scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are not NaN")
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut candidates = Vec::new();
    for (video_id, vscore) in video_scores.iter().take(opts.video_shortlist) {
        let (enc, stride) = &encodings.videos[video_id];
        let loc = localize(&q, enc, cfg, params);
        enumerate_spans(
            query_id,
            video_id,
            *vscore,
            &loc,
            *stride,
            cfg.max_moment_steps,
            &mut candidates,
        );
    }
    sort_predictions(&mut candidates);
    candidates.truncate(opts.top_k);
    Ok((candidates, video_scores))
}

/// Localize within one known video (the SVMR protocol).
pub fn rank_moments_in_video(
    query_id: &str,
    query_text: &str,
    video_id: &str,
    encodings: &CorpusEncodings,
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
    top_k: usize,
) -> Result<Vec<MomentPrediction>, EvalError> {
    let (enc, stride) = encodings
        .videos
        .get(video_id)
        .ok_or_else(|| EvalError::UnknownVideo {
            query_id: query_id.to_string(),
            video_id: video_id.to_string(),
        })?;
    let q = encode_query(query_text, cfg, params)?;
    let vscore = score_video(&q, enc);
    let loc = localize(&q, enc, cfg, params);
    let mut candidates = Vec::new();
    enumerate_spans(
        query_id,
        video_id,
        vscore,
        &loc,
        *stride,
        cfg.max_moment_steps,
        &mut candidates,
    );
    sort_predictions(&mut candidates);
    candidates.truncate(top_k);
    Ok(candidates)
}

/// Recall@k (in percent) for one task at one IoU threshold.
///
/// Queries present in `ground_truth` but missing from `predictions` count as
/// misses. For VR the prediction list is reduced to distinct videos in rank
/// order and the IoU threshold is ignored.
pub fn recall_at_k(
    predictions: &BTreeMap<String, Vec<MomentPrediction>>,
    ground_truth: &BTreeMap<String, GroundTruth>,
    k: usize,
    iou_threshold: f64,
    task: Task,
) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (query_id, gt) in ground_truth {
        let Some(preds) = predictions.get(query_id) else {
            continue;
        };
        let hit = match task {
            Task::Vr => {
                let mut seen = Vec::new();
                for p in preds {
                    if !seen.contains(&p.video_id.as_str()) {
                        seen.push(&p.video_id);
                        if seen.len() > k {
                            break;
                        }
                        if p.video_id == gt.video_id && seen.len() <= k {
                            break;
                        }
                    }
                }
                seen.iter().take(k).any(|v| **v == gt.video_id)
            }
            Task::Svmr => preds
                .iter()
                .filter(|p| p.video_id == gt.video_id)
                .take(k)
                .any(|p| temporal_iou((p.ts_s, p.te_s), (gt.ts_s, gt.te_s)) >= iou_threshold),
            Task::Vcmr => preds.iter().take(k).any(|p| {
                p.video_id == gt.video_id
                    && temporal_iou((p.ts_s, p.te_s), (gt.ts_s, gt.te_s)) >= iou_threshold
            }),
        };
        if hit {
            hits += 1;
        }
    }
    100.0 * hits as f64 / ground_truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// Absent for VR, which ignores localization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aver: Option<f64>,
}

/// Mean of VCMR R@{1,5,10} at IoU 0.5.
pub fn aver_score(reports: &[EvalReport]) -> Result<f64, EvalError> {
    let vcmr = reports
        .iter()
        .find(|r| r.task == Task::Vcmr && r.iou_threshold == Some(0.5))
        .ok_or(EvalError::MissingK(1))?;
    let mut sum = 0.0;
    for k in [1usize, 5, 10] {
        sum += vcmr.recall_at.get(&k).copied().ok_or(EvalError::MissingK(k))?;
    }
    Ok(sum / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tasks: Vec<Task>,
    pub iou_thresholds: Vec<f64>,
    pub ks: Vec<usize>,
    pub video_shortlist: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tasks: vec![Task::Vr, Task::Svmr, Task::Vcmr],
            iou_thresholds: vec![0.5, 0.7],
            ks: vec![1, 5, 10, 100],
            video_shortlist: 100,
        }
    }
}

pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    /// Global moment predictions per query (the VCMR lists).
    pub predictions: BTreeMap<String, Vec<MomentPrediction>>,
}

/// Full evaluation protocol over annotated queries.
pub fn evaluate(
    corpus: &CorpusIndex,
    queries: &[AnnotatedQuery],
    cfg: &ModelConfig,
    params: &ModelParams<Matrix>,
    opts: &EvalOptions,
    scope: &EvalScope,
) -> Result<EvalOutcome, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let encodings = encode_corpus(corpus, cfg, params)?;
    let max_k = opts.ks.iter().copied().max().unwrap_or(1);
    let rank_opts = RankOptions {
        top_k: max_k,
        video_shortlist: opts.video_shortlist,
    };

    let mut gt_map = BTreeMap::new();
    let mut moment_preds = BTreeMap::new();
    let mut svmr_preds = BTreeMap::new();
    let mut video_preds = BTreeMap::new();
    for query in queries {
        let query_id = query.query_id(scope).to_string();
        let video_id = query.video_id(scope).to_string();
        let (ts, te) = query.interval(scope);
        let text = query.text(scope).to_string();
        if corpus.get(&video_id).is_none() {
            return Err(EvalError::UnknownVideo { query_id, video_id });
        }
        let (moments, video_ranking) =
            rank_moments(&query_id, &text, &encodings, cfg, params, &rank_opts)?;
        // The VR task consumes the video-level ranking as one pseudo-moment
        // per video.
        let as_video_preds: Vec<MomentPrediction> = video_ranking
            .iter()
            .map(|(vid, score)| MomentPrediction {
                query_id: query_id.clone(),
                video_id: vid.clone(),
                ts_s: 0.0,
                te_s: 1.0,
                score: *score,
            })
            .collect();
        if opts.tasks.contains(&Task::Svmr) {
            svmr_preds.insert(
                query_id.clone(),
                rank_moments_in_video(
                    &query_id, &text, &video_id, &encodings, cfg, params, max_k,
                )?,
            );
        }
        moment_preds.insert(query_id.clone(), moments);
        video_preds.insert(query_id.clone(), as_video_preds);
        gt_map.insert(
            query_id,
            GroundTruth {
                video_id,
                ts_s: ts,
                te_s: te,
            },
        );
    }

    let mut reports = Vec::new();
    for task in &opts.tasks {
        match task {
            Task::Vr => {
                let recall_at: BTreeMap<usize, f64> = opts
                    .ks
                    .iter()
                    .map(|&k| (k, recall_at_k(&video_preds, &gt_map, k, 0.0, Task::Vr)))
                    .collect();
                reports.push(EvalReport {
                    task: Task::Vr,
                    iou_threshold: None,
                    recall_at,
                    aver: None,
                });
            }
            Task::Svmr | Task::Vcmr => {
                let preds = if *task == Task::Svmr {
                    &svmr_preds
                } else {
                    &moment_preds
                };
                for &thr in &opts.iou_thresholds {
                    let recall_at: BTreeMap<usize, f64> = opts
                        .ks
                        .iter()
                        .map(|&k| (k, recall_at_k(preds, &gt_map, k, thr, *task)))
                        .collect();
                    reports.push(EvalReport {
                        task: *task,
                        iou_threshold: Some(thr),
                        recall_at,
                        aver: None,
                    });
                }
            }
        }
    }
    if let Ok(aver) = aver_score(&reports) {
        for report in reports.iter_mut() {
            if report.task == Task::Vcmr && report.iou_threshold == Some(0.5) {
                report.aver = Some(aver);
            }
        }
    }
    Ok(EvalOutcome {
        reports,
        predictions: moment_preds,
    })
}

/// Expected VCMR R@1 of a model that picks uniformly among all candidate
/// spans, computed by exact enumeration. The comparison target for trained
/// models.
pub fn analytic_random_vcmr_r1(
    corpus: &CorpusIndex,
    queries: &[AnnotatedQuery],
    cfg: &ModelConfig,
    iou_threshold: f64,
    scope: &EvalScope,
) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut sum_p = 0.0;
    for query in queries {
        let video_id = query.video_id(scope).to_string();
        let (gt_ts, gt_te) = query.interval(scope);
        let mut total = 0usize;
        let mut hits = 0usize;
        for record in corpus.iter() {
            let t = record.visual.rows;
            let stride = record.visual.stride_s as f64;
            for t_s in 0..t {
                let hi = (t_s + cfg.max_moment_steps - 1).min(t - 1);
                for t_e in t_s..=hi {
                    total += 1;
                    if record.video_id == video_id {
                        let iou = temporal_iou(
                            (t_s as f64 * stride, (t_e + 1) as f64 * stride),
                            (gt_ts, gt_te),
                        );
                        if iou >= iou_threshold {
                            hits += 1;
                        }
                    }
                }
            }
        }
        sum_p += hits as f64 / total as f64;
    }
    Ok(100.0 * sum_p / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_reference_values() {
        assert_eq!(temporal_iou((0.0, 10.0), (0.0, 10.0)), 1.0);
        let v = temporal_iou((0.0, 10.0), (5.0, 15.0));
        assert!((v - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(temporal_iou((1.0, 1.0), (1.0, 1.0)), 0.0);
        assert_eq!(temporal_iou((5.0, 5.0), (0.0, 10.0)), 0.0);
    }

    fn pred(query: &str, video: &str, ts: f64, te: f64, score: f64) -> MomentPrediction {
        MomentPrediction {
            query_id: query.into(),
            video_id: video.into(),
            ts_s: ts,
            te_s: te,
            score,
        }
    }

    fn single_query_fixture(iou: f64) -> (
        BTreeMap<String, Vec<MomentPrediction>>,
        BTreeMap<String, GroundTruth>,
    ) {
        // Ground truth [0, 10]; a prediction with the requested IoU that
        // shares the start point: [0, 10*iou].
        let mut preds = BTreeMap::new();
        preds.insert(
            "q".to_string(),
            vec![pred("q", "v", 0.0, 10.0 * iou, 5.0)],
        );
        let mut gt = BTreeMap::new();
        gt.insert(
            "q".to_string(),
            GroundTruth {
                video_id: "v".into(),
                ts_s: 0.0,
                te_s: 10.0,
            },
        );
        (preds, gt)
    }

    #[test]
    fn recall_threshold_boundary() {
        let (preds, gt) = single_query_fixture(0.8);
        assert_eq!(recall_at_k(&preds, &gt, 1, 0.7, Task::Vcmr), 100.0);
        let (preds, gt) = single_query_fixture(0.6);
        assert_eq!(recall_at_k(&preds, &gt, 1, 0.7, Task::Vcmr), 0.0);
        assert_eq!(recall_at_k(&preds, &gt, 1, 0.5, Task::Vcmr), 100.0);
    }

    #[test]
    fn identity_predictions_score_perfectly() {
        let mut preds = BTreeMap::new();
        let mut gt = BTreeMap::new();
        for i in 0..20 {
            let q = format!("q{i}");
            let v = format!("v{i}");
            let (ts, te) = (i as f64, i as f64 + 5.0);
            preds.insert(q.clone(), vec![pred(&q, &v, ts, te, 1.0)]);
            gt.insert(
                q,
                GroundTruth {
                    video_id: v,
                    ts_s: ts,
                    te_s: te,
                },
            );
        }
        for task in [Task::Vr, Task::Svmr, Task::Vcmr] {
            for thr in [0.5, 0.7, 0.99] {
                assert_eq!(recall_at_k(&preds, &gt, 1, thr, task), 100.0);
            }
        }
    }

    #[test]
    fn missing_predictions_count_as_miss() {
        let (_, gt) = single_query_fixture(0.9);
        let empty = BTreeMap::new();
        assert_eq!(recall_at_k(&empty, &gt, 10, 0.5, Task::Vcmr), 0.0);
    }

    #[test]
    fn aver_is_the_mean_of_three_recalls() {
        let report = EvalReport {
            task: Task::Vcmr,
            iou_threshold: Some(0.5),
            recall_at: [(1, 1.0), (5, 2.0), (10, 3.0)].into_iter().collect(),
            aver: None,
        };
        assert!((aver_score(&[report]).unwrap() - 2.0).abs() < 1e-12);
        let zeros = EvalReport {
            task: Task::Vcmr,
            iou_threshold: Some(0.5),
            recall_at: [(1, 0.0), (5, 0.0), (10, 0.0)].into_iter().collect(),
            aver: None,
        };
        assert_eq!(aver_score(&[zeros]).unwrap(), 0.0);
        let missing = EvalReport {
            task: Task::Vcmr,
            iou_threshold: Some(0.5),
            recall_at: [(1, 0.0), (5, 0.0)].into_iter().collect(),
            aver: None,
        };
        assert!(matches!(
            aver_score(&[missing]),
            Err(EvalError::MissingK(10))
        ));
    }

    #[test]
    fn vr_recall_dominates_vcmr_on_same_predictions() {
        let mut preds = BTreeMap::new();
        preds.insert(
            "q".to_string(),
            vec![
                pred("q", "a", 0.0, 3.0, 9.0),
                pred("q", "v", 50.0, 60.0, 8.0),
                pred("q", "v", 0.0, 10.0, 7.0),
            ],
        );
        let mut gt = BTreeMap::new();
        gt.insert(
            "q".to_string(),
            GroundTruth {
                video_id: "v".into(),
                ts_s: 0.0,
                te_s: 10.0,
            },
        );
        for k in 1..=3 {
            let vr = recall_at_k(&preds, &gt, k, 0.7, Task::Vr);
            let vcmr = recall_at_k(&preds, &gt, k, 0.7, Task::Vcmr);
            assert!(vr >= vcmr, "k={k}: vr={vr} vcmr={vcmr}");
        }
    }
}
