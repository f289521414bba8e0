//! Subtitled-video corpus: domain types, file formats and corpus assembly.
//!
//! A corpus is a set of videos, each carrying an ordered subtitle track and
//! precomputed dense feature matrices (visual, optionally subtitle). Videos
//! arrive either from a manifest referencing SRT/JSONL subtitle files and
//! FMAT feature files, or from the synthetic generator in [`synth`].

mod fmat;
mod jsonl;
mod srt;
pub mod synth;

pub use fmat::{load_features, write_features};
pub use jsonl::{parse_jsonl_track, write_jsonl_track};
pub use srt::{parse_srt, write_srt, SpeakerConvention};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firewall::EvalScope;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty subtitle input")]
    EmptySubtitles,
    #[error("malformed SRT block {block}: {reason}")]
    Srt { block: usize, reason: String },
    #[error("subtitle JSONL line {line}: {reason}")]
    Jsonl { line: usize, reason: String },
    #[error("mixed video ids in one track: {expected:?} vs {found:?}")]
    MixedVideoIds { expected: String, found: String },
    #[error("feature file {path:?}: {reason}")]
    Fmat { path: PathBuf, reason: String },
    #[error("manifest {path:?}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("duplicate video id {0:?}")]
    DuplicateVideoId(String),
    #[error("video {video_id:?}: {reason}")]
    Invariant { video_id: String, reason: String },
    #[error("synthetic corpus: {0}")]
    Synth(String),
}

/// One subtitle cue: a timed utterance with an optional speaker tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleCue {
    /// 1-based position within the track.
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub speaker: Option<String>,
    pub text: String,
}

impl SubtitleCue {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.start_s >= 0.0) {
            return Err(format!("cue {}: negative start time", self.index));
        }
        if !(self.end_s > self.start_s) {
            return Err(format!(
                "cue {}: end {} not after start {}",
                self.index, self.end_s, self.start_s
            ));
        }
        if self.text.trim().is_empty() {
            return Err(format!("cue {}: empty text", self.index));
        }
        if let Some(speaker) = &self.speaker {
            if speaker.trim().is_empty() {
                return Err(format!("cue {}: empty speaker", self.index));
            }
            if speaker.contains(':') {
                return Err(format!("cue {}: speaker contains a colon", self.index));
            }
        }
        Ok(())
    }
}

/// Ordered subtitle cues for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleTrack {
    pub video_id: String,
    pub cues: Vec<SubtitleCue>,
}

impl SubtitleTrack {
    /// Build a track and check all invariants: cues sorted by start time,
    /// indices contiguous from 1, at least one cue.
    pub fn new(video_id: impl Into<String>, cues: Vec<SubtitleCue>) -> Result<Self, CorpusError> {
        let track = SubtitleTrack {
            video_id: video_id.into(),
            cues,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::Invariant {
            video_id: self.video_id.clone(),
            reason,
        };
        if self.cues.is_empty() {
            return Err(fail("track has no cues".into()));
        }
        for (i, cue) in self.cues.iter().enumerate() {
            cue.validate().map_err(&fail)?;
            if cue.index != i + 1 {
                return Err(fail(format!(
                    "cue index {} at position {}, expected {}",
                    cue.index,
                    i,
                    i + 1
                )));
            }
            if i > 0 && cue.start_s < self.cues[i - 1].start_s {
                return Err(fail(format!("cue {} starts before its predecessor", cue.index)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cues.is_empty()
    }

    /// Cues covered by an inclusive 1-based index range.
    pub fn cue_range(&self, start_idx: usize, end_idx: usize) -> Option<&[SubtitleCue]> {
        if start_idx == 0 || end_idx < start_idx || end_idx > self.cues.len() {
            return None;
        }
        Some(&self.cues[start_idx - 1..end_idx])
    }

    pub fn last_end_s(&self) -> f64 {
        self.cues.iter().map(|c| c.end_s).fold(0.0, f64::max)
    }
}

/// Time-major dense feature rows for one video stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub video_id: String,
    /// Seconds covered by each row.
    pub stride_s: f32,
    pub rows: usize,
    pub dims: usize,
    /// Row-major, `rows * dims` values.
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        video_id: impl Into<String>,
        stride_s: f32,
        rows: usize,
        dims: usize,
        data: Vec<f32>,
    ) -> Result<Self, CorpusError> {
        let m = FeatureMatrix {
            video_id: video_id.into(),
            stride_s,
            rows,
            dims,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::Invariant {
            video_id: self.video_id.clone(),
            reason,
        };
        if self.rows == 0 || self.dims == 0 {
            return Err(fail("feature matrix must have at least one row and one dim".into()));
        }
        if !(self.stride_s > 0.0) {
            return Err(fail(format!("non-positive stride {}", self.stride_s)));
        }
        if self.data.len() != self.rows * self.dims {
            return Err(fail(format!(
                "data length {} != rows {} * dims {}",
                self.data.len(),
                self.rows,
                self.dims
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dims..(r + 1) * self.dims]
    }

    /// Seconds covered by the matrix.
    pub fn coverage_s(&self) -> f64 {
        self.rows as f64 * self.stride_s as f64
    }
}

/// A fully loaded video: subtitles plus feature streams.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub track: SubtitleTrack,
    pub visual: FeatureMatrix,
    pub subtitle_features: Option<FeatureMatrix>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::Invariant {
            video_id: self.video_id.clone(),
            reason,
        };
        self.track.validate()?;
        self.visual.validate()?;
        if let Some(sub) = &self.subtitle_features {
            sub.validate()?;
            if sub.video_id != self.video_id {
                return Err(fail(format!(
                    "subtitle feature matrix tagged {:?}",
                    sub.video_id
                )));
            }
        }
        if self.track.video_id != self.video_id {
            return Err(fail(format!("track tagged {:?}", self.track.video_id)));
        }
        if self.visual.video_id != self.video_id {
            return Err(fail(format!(
                "visual feature matrix tagged {:?}",
                self.visual.video_id
            )));
        }
        let last_end = self.track.last_end_s();
        if self.duration_s < last_end {
            return Err(fail(format!(
                "duration {} shorter than last cue end {}",
                self.duration_s, last_end
            )));
        }
        // Features must cover the track up to one stride of tolerance.
        let stride = self.visual.stride_s as f64;
        if self.visual.coverage_s() < last_end - stride {
            return Err(fail(format!(
                "visual features cover {:.3}s but cues end at {:.3}s",
                self.visual.coverage_s(),
                last_end
            )));
        }
        Ok(())
    }
}

/// Human-annotated evaluation query. Fields are private and readable only
/// through an [`EvalScope`]; see [`crate::firewall`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedQuery {
    query_id: String,
    video_id: String,
    ts_s: f64,
    te_s: f64,
    text: String,
}

impl AnnotatedQuery {
    pub fn new(
        query_id: impl Into<String>,
        video_id: impl Into<String>,
        ts_s: f64,
        te_s: f64,
        text: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let q = AnnotatedQuery {
            query_id: query_id.into(),
            video_id: video_id.into(),
            ts_s,
            te_s,
            text: text.into(),
        };
        if !(q.ts_s >= 0.0 && q.ts_s < q.te_s) {
            return Err(CorpusError::Invariant {
                video_id: q.video_id,
                reason: format!("annotated interval [{}, {}] is invalid", ts_s, q.te_s),
            });
        }
        if q.text.trim().is_empty() {
            return Err(CorpusError::Invariant {
                video_id: q.video_id,
                reason: "annotated query text is empty".into(),
            });
        }
        Ok(q)
    }

    pub fn query_id(&self, scope: &EvalScope) -> &str {
        scope.record_read();
        &self.query_id
    }

    pub fn video_id(&self, scope: &EvalScope) -> &str {
        scope.record_read();
        &self.video_id
    }

    pub fn interval(&self, scope: &EvalScope) -> (f64, f64) {
        scope.record_read();
        (self.ts_s, self.te_s)
    }

    pub fn text(&self, scope: &EvalScope) -> &str {
        scope.record_read();
        &self.text
    }
}

/// Serialization record for annotated queries (eval-side files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedQueryRecord {
    pub query_id: String,
    pub video_id: String,
    pub ts: f64,
    pub te: f64,
    pub text: String,
}

impl AnnotatedQuery {
    pub fn to_record(&self, scope: &EvalScope) -> AnnotatedQueryRecord {
        scope.record_read();
        AnnotatedQueryRecord {
            query_id: self.query_id.clone(),
            video_id: self.video_id.clone(),
            ts: self.ts_s,
            te: self.te_s,
            text: self.text.clone(),
        }
    }

    pub fn from_record(rec: AnnotatedQueryRecord) -> Result<Self, CorpusError> {
        AnnotatedQuery::new(rec.query_id, rec.video_id, rec.ts, rec.te, rec.text)
    }
}

/// Immutable, validated collection of videos keyed by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusIndex {
    videos: BTreeMap<String, VideoRecord>,
}

impl CorpusIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: VideoRecord) -> Result<(), CorpusError> {
        record.validate()?;
        if self.videos.contains_key(&record.video_id) {
            return Err(CorpusError::DuplicateVideoId(record.video_id));
        }
        self.videos.insert(record.video_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Videos in deterministic (id-sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = &VideoRecord> {
        self.videos.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(|s| s.as_str())
    }
}

/// One manifest entry; paths are resolved relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub subtitles: String,
    pub visual_features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtitle_features: Option<String>,
}

/// Load a manifest and assemble the corpus it describes.
///
/// Subtitle files ending in `.srt` are parsed with the prefix-colon speaker
/// convention; `.jsonl` files carry structured speakers. A missing duration
/// defaults to `max(last cue end, feature coverage)`.
pub fn build_corpus(manifest_path: &Path) -> Result<CorpusIndex, CorpusError> {
    let manifest_err = |reason: String| CorpusError::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(manifest_path)?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_slice(&bytes).map_err(|e| manifest_err(e.to_string()))?;
    if entries.is_empty() {
        return Err(manifest_err("manifest lists no videos".into()));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut index = CorpusIndex::new();
    for entry in entries {
        let sub_path = base.join(&entry.subtitles);
        let sub_bytes = std::fs::read(&sub_path)?;
        let track = if entry.subtitles.ends_with(".srt") {
            parse_srt(&entry.video_id, &sub_bytes, SpeakerConvention::PrefixColon)?
        } else {
            let text = String::from_utf8_lossy(&sub_bytes);
            let track = parse_jsonl_track(text.lines())?;
            if track.video_id != entry.video_id {
                return Err(CorpusError::MixedVideoIds {
                    expected: entry.video_id.clone(),
                    found: track.video_id,
                });
            }
            track
        };
        let visual = load_features(&base.join(&entry.visual_features), &entry.video_id)?;
        let subtitle_features = entry
            .subtitle_features
            .as_ref()
            .map(|p| load_features(&base.join(p), &entry.video_id))
            .transpose()?;
        let duration_s = entry
            .duration_s
            .unwrap_or_else(|| track.last_end_s().max(visual.coverage_s()));
        index.insert(VideoRecord {
            video_id: entry.video_id,
            duration_s,
            track,
            visual,
            subtitle_features,
        })?;
    }
    Ok(index)
}
