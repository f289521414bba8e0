//! Temporal moment sampling.
//!
//! Two strategies produce candidate (start, end) spans for a video: the
//! subtitle-based sampler draws runs of consecutive cues and inherits their
//! timestamps, and a feature-based baseline clusters adjacent feature rows by
//! cosine similarity and enumerates contiguous cluster runs. Both are pure
//! functions of their inputs with per-video derived seeds, so videos can be
//! sampled in parallel without changing artifacts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureMatrix, SubtitleTrack};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("moment [{ts:.3}, {te:.3}] lies entirely beyond feature coverage {coverage:.3}")]
    BeyondFeatures { ts: f64, te: f64, coverage: f64 },
}

/// A span of consecutive subtitle cues with derived timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMoment {
    pub video_id: String,
    /// 1-based index of the first cue.
    pub cue_start_idx: usize,
    /// 1-based index of the last cue, inclusive.
    pub cue_end_idx: usize,
    pub ts_s: f64,
    pub te_s: f64,
}

/// Wire format for moments JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentRecord {
    pub video_id: String,
    pub cue_start: usize,
    pub cue_end: usize,
    pub ts: f64,
    pub te: f64,
}

impl TemporalMoment {
    pub fn to_record(&self) -> MomentRecord {
        MomentRecord {
            video_id: self.video_id.clone(),
            cue_start: self.cue_start_idx,
            cue_end: self.cue_end_idx,
            ts: self.ts_s,
            te: self.te_s,
        }
    }

    pub fn from_record(rec: MomentRecord) -> Self {
        TemporalMoment {
            video_id: rec.video_id,
            cue_start_idx: rec.cue_start,
            cue_end_idx: rec.cue_end,
            ts_s: rec.ts,
            te_s: rec.te,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.te_s - self.ts_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Minimum number of consecutive cues per moment.
    pub l_min: usize,
    /// Maximum number of consecutive cues per moment.
    pub l_max: usize,
    pub moments_per_video: usize,
    pub seed: u64,
    /// Drop duplicate (start, end) draws within a video.
    #[serde(default)]
    pub dedup: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            l_min: 2,
            l_max: 5,
            moments_per_video: 7,
            seed: 42,
            dedup: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.l_min < 1 || self.l_min > self.l_max {
            return Err(SamplingError::Config(format!(
                "need 1 <= l_min <= l_max, got l_min={} l_max={}",
                self.l_min, self.l_max
            )));
        }
        if self.moments_per_video == 0 {
            return Err(SamplingError::Config("moments_per_video must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draw moments as runs of `l` consecutive cues, `l` uniform on
/// `[l_min, min(l_max, n)]` and the start cue uniform over valid positions.
/// `l` counts cues, so a moment spans cues `start ..= start + l - 1`.
pub fn sample_subtitle_moments(track: &SubtitleTrack, cfg: &SamplerConfig) -> Vec<TemporalMoment> {
    let n = track.len();
    debug_assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &track.video_id));
    let l_lo = cfg.l_min.min(n);
    let l_hi = cfg.l_max.min(n);
    let mut moments = Vec::with_capacity(cfg.moments_per_video);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..cfg.moments_per_video {
        let l = rng.gen_range(l_lo..=l_hi);
        let start = rng.gen_range(1..=n - l + 1);
        let end = start + l - 1;
        if cfg.dedup && !seen.insert((start, end)) {
            continue;
        }
        moments.push(TemporalMoment {
            video_id: track.video_id.clone(),
            cue_start_idx: start,
            cue_end_idx: end,
            ts_s: track.cues[start - 1].start_s,
            te_s: track.cues[end - 1].end_s,
        });
    }
    moments
}

/// Sample moments for every video of a corpus in id order.
pub fn sample_corpus_moments(
    corpus: &crate::corpus::CorpusIndex,
    cfg: &SamplerConfig,
) -> Vec<TemporalMoment> {
    corpus
        .iter()
        .flat_map(|rec| sample_subtitle_moments(&rec.track, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSamplerConfig {
    /// Cosine similarity below which a row starts a new cluster.
    pub threshold: f64,
    pub moments_per_video: usize,
    pub seed: u64,
}

impl Default for FeatureSamplerConfig {
    fn default() -> Self {
        FeatureSamplerConfig {
            threshold: 0.8,
            moments_per_video: 7,
            seed: 42,
        }
    }
}

/// A candidate span from the feature-based baseline, in feature-row units.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpan {
    pub video_id: String,
    pub row_lo: usize,
    pub row_hi: usize,
    pub ts_s: f64,
    pub te_s: f64,
}

impl FeatureSpan {
    /// Map the span onto the cue range it overlaps, yielding a moment the
    /// rest of the pipeline can consume. Returns None when no cue overlaps.
    pub fn to_moment(&self, track: &SubtitleTrack) -> Option<TemporalMoment> {
        let mut first: Option<usize> = None;
        let mut last: Option<usize> = None;
        for cue in &track.cues {
            if cue.start_s < self.te_s && cue.end_s > self.ts_s {
                first.get_or_insert(cue.index);
                last = Some(cue.index);
            }
        }
        let (cue_start_idx, cue_end_idx) = (first?, last?);
        Some(TemporalMoment {
            video_id: self.video_id.clone(),
            cue_start_idx,
            cue_end_idx,
            ts_s: track.cues[cue_start_idx - 1].start_s,
            te_s: track.cues[cue_end_idx - 1].end_s,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Greedily cluster consecutive rows: a row joins the running cluster unless
/// its cosine similarity to the cluster mean drops below the threshold.
/// Returns half-open row ranges.
pub fn cluster_rows(features: &FeatureMatrix, threshold: f64) -> Vec<(usize, usize)> {
    let d = features.dims;
    let mut clusters: Vec<(usize, usize)> = Vec::new();
    let mut mean: Vec<f64> = features.row(0).iter().map(|&v| v as f64).collect();
    let mut count = 1.0f64;
    let mut start = 0usize;
    for r in 1..features.rows {
        let row: Vec<f64> = features.row(r).iter().map(|&v| v as f64).collect();
        if cosine(&row, &mean) < threshold {
            clusters.push((start, r));
            start = r;
            mean = row;
            count = 1.0;
        } else {
            for i in 0..d {
                mean[i] = (mean[i] * count + row[i]) / (count + 1.0);
            }
            count += 1.0;
        }
    }
    clusters.push((start, features.rows));
    clusters
}

/// Enumerate all contiguous cluster runs and sample up to
/// `moments_per_video` of them uniformly without replacement.
pub fn sample_feature_moments(
    features: &FeatureMatrix,
    cfg: &FeatureSamplerConfig,
) -> Vec<FeatureSpan> {
    let clusters = cluster_rows(features, cfg.threshold);
    let c = clusters.len();
    let stride = features.stride_s as f64;
    let mut candidates = Vec::with_capacity(c * (c + 1) / 2);
    for i in 0..c {
        for j in i..c {
            let row_lo = clusters[i].0;
            let row_hi = clusters[j].1 - 1;
            candidates.push(FeatureSpan {
                video_id: features.video_id.clone(),
                row_lo,
                row_hi,
                ts_s: row_lo as f64 * stride,
                te_s: (row_hi + 1) as f64 * stride,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &features.video_id));
    let take = cfg.moments_per_video.min(candidates.len());
    rand::seq::index::sample(&mut rng, candidates.len(), take)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

/// Feature-row range `[row_lo, row_hi]` covered by a moment:
/// `row_lo = floor(ts / stride)`, `row_hi = min(T - 1, floor(te / stride))`.
pub fn moment_frame_range(
    m: &TemporalMoment,
    features: &FeatureMatrix,
) -> Result<(usize, usize), SamplingError> {
    let stride = features.stride_s as f64;
    let row_lo = (m.ts_s / stride).floor() as usize;
    if row_lo >= features.rows {
        return Err(SamplingError::BeyondFeatures {
            ts: m.ts_s,
            te: m.te_s,
            coverage: features.coverage_s(),
        });
    }
    let row_hi = ((m.te_s / stride).floor() as usize).min(features.rows - 1);
    debug_assert!(row_lo <= row_hi);
    Ok((row_lo, row_hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SubtitleCue;

    fn track_of(n: usize) -> SubtitleTrack {
        let cues = (0..n)
            .map(|i| SubtitleCue {
                index: i + 1,
                start_s: i as f64 * 2.0,
                end_s: i as f64 * 2.0 + 1.5,
                speaker: None,
                text: format!("cue {i}"),
            })
            .collect();
        SubtitleTrack::new("v", cues).unwrap()
    }

    #[test]
    fn single_cue_track_clamps_length() {
        let track = track_of(1);
        let cfg = SamplerConfig {
            moments_per_video: 20,
            ..SamplerConfig::default()
        };
        let moments = sample_subtitle_moments(&track, &cfg);
        assert_eq!(moments.len(), 20);
        for m in moments {
            assert_eq!((m.cue_start_idx, m.cue_end_idx), (1, 1));
            assert_eq!((m.ts_s, m.te_s), (0.0, 1.5));
        }
    }

    #[test]
    fn fixed_length_config_spans_exactly_three_cues() {
        let track = track_of(10);
        let cfg = SamplerConfig {
            l_min: 3,
            l_max: 3,
            moments_per_video: 200,
            ..SamplerConfig::default()
        };
        for m in sample_subtitle_moments(&track, &cfg) {
            assert_eq!(m.cue_end_idx - m.cue_start_idx + 1, 3);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let track = track_of(8);
        let cfg = SamplerConfig::default();
        assert_eq!(
            sample_subtitle_moments(&track, &cfg),
            sample_subtitle_moments(&track, &cfg)
        );
    }

    #[test]
    fn moments_stay_in_bounds() {
        let track = track_of(6);
        let cfg = SamplerConfig {
            moments_per_video: 500,
            ..SamplerConfig::default()
        };
        for m in sample_subtitle_moments(&track, &cfg) {
            assert!(m.cue_start_idx >= 1);
            assert!(m.cue_end_idx <= 6);
            let l = m.cue_end_idx - m.cue_start_idx + 1;
            assert!((2..=5).contains(&l));
            assert!(m.cue_start_idx <= 6 - l + 1);
            assert!(m.te_s > m.ts_s);
        }
    }

    fn block_features(blocks: &[(usize, [f32; 4])]) -> FeatureMatrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for (count, row) in blocks {
            for _ in 0..*count {
                data.extend_from_slice(row);
                rows += 1;
            }
        }
        FeatureMatrix::new("v", 1.5, rows, 4, data).unwrap()
    }

    #[test]
    fn three_clusters_give_six_candidates() {
        let features = block_features(&[
            (3, [1.0, 0.0, 0.0, 0.0]),
            (2, [0.0, 1.0, 0.0, 0.0]),
            (3, [0.0, 0.0, 1.0, 0.0]),
        ]);
        let clusters = cluster_rows(&features, 0.7);
        assert_eq!(clusters, vec![(0, 3), (3, 5), (5, 8)]);
        let cfg = FeatureSamplerConfig {
            moments_per_video: 100,
            ..FeatureSamplerConfig::default()
        };
        let spans = sample_feature_moments(&features, &cfg);
        assert_eq!(spans.len(), 6);
    }

    #[test]
    fn degenerate_threshold_gives_one_candidate() {
        let features = block_features(&[(4, [1.0, 0.0, 0.0, 0.0]), (4, [0.0, 1.0, 0.0, 0.0])]);
        let cfg = FeatureSamplerConfig {
            threshold: -1.0,
            moments_per_video: 10,
            ..FeatureSamplerConfig::default()
        };
        let spans = sample_feature_moments(&features, &cfg);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].row_lo, spans[0].row_hi), (0, 7));
    }

    #[test]
    fn identical_rows_form_a_single_cluster() {
        let features = block_features(&[(5, [0.3, 0.3, 0.3, 0.3])]);
        assert_eq!(cluster_rows(&features, 0.8), vec![(0, 5)]);
    }

    #[test]
    fn frame_range_floor_arithmetic() {
        let features = FeatureMatrix::new("v", 1.5, 8, 2, vec![0.0; 16]).unwrap();
        let m = TemporalMoment {
            video_id: "v".into(),
            cue_start_idx: 1,
            cue_end_idx: 2,
            ts_s: 3.0,
            te_s: 7.5,
        };
        assert_eq!(moment_frame_range(&m, &features).unwrap(), (2, 5));
    }

    #[test]
    fn moment_beyond_features_errors() {
        let features = FeatureMatrix::new("v", 1.5, 4, 2, vec![0.0; 8]).unwrap();
        let m = TemporalMoment {
            video_id: "v".into(),
            cue_start_idx: 1,
            cue_end_idx: 1,
            ts_s: 10.0,
            te_s: 12.0,
        };
        assert!(moment_frame_range(&m, &features).is_err());
    }
}
