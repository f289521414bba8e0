//! Modal-specific pseudo-query generation.
//!
//! Every sampled moment yields up to three query styles: a visual query
//! (speaker-name template plus a frame caption for the middle frame of the
//! moment), a textual query (dialog summarization of the moment's cues) and
//! a raw-dialog baseline (cue texts concatenated, no summarization).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusIndex, FeatureMatrix, SubtitleTrack};
use crate::providers::{
    bounded_map, CaptionProvider, CaptionRequest, DialogTurn, Providers, SummaryProvider,
    SummaryRequest,
};
use crate::sampling::{
    moment_frame_range, sample_corpus_moments, SamplerConfig, SamplingError, TemporalMoment,
};

#[derive(Debug, Error)]
pub enum QueryGenError {
    #[error("unknown video {0:?}")]
    UnknownVideo(String),
    #[error("moment cues [{start}, {end}] invalid for a track of {n} cues")]
    InvalidMoment { start: usize, end: usize, n: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("moment {video_id}:{cue_start}-{cue_end}: {reason}")]
    Generation {
        video_id: String,
        cue_start: usize,
        cue_end: usize,
        reason: String,
    },
    #[error("{failed} of {total} moments failed generation, over the 10% budget")]
    FailureBudget { failed: usize, total: usize },
}

/// Query modality tags, in canonical output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
    Dialog,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::Dialog => "dialog",
        };
        f.write_str(s)
    }
}

/// Unique character names in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CharacterSet {
    names: Vec<String>,
}

impl CharacterSet {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut set = CharacterSet::default();
        for name in names {
            set.push(name);
        }
        set
    }

    fn push(&mut self, name: String) {
        if !self
            .names
            .iter()
            .any(|n| n.eq_ignore_ascii_case(&name))
        {
            self.names.push(name);
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Title-case a speaker name and collapse internal whitespace.
fn normalize_speaker(raw: &str) -> String {
    raw.split_whitespace()
        .map(|word| {
            let mut chars = word.chars();
            match chars.next() {
                Some(first) => {
                    first.to_uppercase().collect::<String>() + &chars.as_str().to_lowercase()
                }
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Unique speakers of the moment's cues, normalized, in first-appearance
/// order. Empty when `include_speaker` is false (speaker-name ablation).
pub fn extract_characters(
    track: &SubtitleTrack,
    moment: &TemporalMoment,
    include_speaker: bool,
) -> Result<CharacterSet, QueryGenError> {
    let cues = track
        .cue_range(moment.cue_start_idx, moment.cue_end_idx)
        .ok_or(QueryGenError::InvalidMoment {
            start: moment.cue_start_idx,
            end: moment.cue_end_idx,
            n: track.len(),
        })?;
    if !include_speaker {
        return Ok(CharacterSet::default());
    }
    let mut set = CharacterSet::default();
    for cue in cues {
        if let Some(speaker) = &cue.speaker {
            set.push(normalize_speaker(speaker));
        }
    }
    Ok(set)
}

/// Render the character-name sentence:
/// none -> `Someone is speaking.`; one -> `{name} is speaking.`;
/// several -> `{a}, {b} and {c} are talking together.`
pub fn render_character_template(chars: &CharacterSet) -> String {
    match chars.names() {
        [] => "Someone is speaking.".to_string(),
        [one] => format!("{one} is speaking."),
        names => {
            let (last, rest) = names.split_last().unwrap();
            format!("{} and {last} are talking together.", rest.join(", "))
        }
    }
}

/// A generated query bound to its source moment.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoQuery {
    pub query_id: String,
    pub moment: TemporalMoment,
    pub modality: Modality,
    pub text: String,
}

/// Wire format for pseudo-query JSONL; also the training input format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoQueryRecord {
    pub query_id: String,
    pub video_id: String,
    pub cue_start: usize,
    pub cue_end: usize,
    pub ts: f64,
    pub te: f64,
    pub modality: Modality,
    pub text: String,
}

impl PseudoQuery {
    pub fn to_record(&self) -> PseudoQueryRecord {
        PseudoQueryRecord {
            query_id: self.query_id.clone(),
            video_id: self.moment.video_id.clone(),
            cue_start: self.moment.cue_start_idx,
            cue_end: self.moment.cue_end_idx,
            ts: self.moment.ts_s,
            te: self.moment.te_s,
            modality: self.modality,
            text: self.text.clone(),
        }
    }

    pub fn from_record(rec: PseudoQueryRecord) -> Self {
        PseudoQuery {
            query_id: rec.query_id,
            moment: TemporalMoment {
                video_id: rec.video_id,
                cue_start_idx: rec.cue_start,
                cue_end_idx: rec.cue_end,
                ts_s: rec.ts,
                te_s: rec.te,
            },
            modality: rec.modality,
            text: rec.text,
        }
    }
}

fn generation_err(moment: &TemporalMoment, reason: impl fmt::Display) -> QueryGenError {
    QueryGenError::Generation {
        video_id: moment.video_id.clone(),
        cue_start: moment.cue_start_idx,
        cue_end: moment.cue_end_idx,
        reason: reason.to_string(),
    }
}

/// Compose the visual query: character template plus the caption of the
/// moment's middle feature row.
pub fn visual_pseudo_query(
    query_id: impl Into<String>,
    moment: &TemporalMoment,
    features: &FeatureMatrix,
    chars: &CharacterSet,
    provider: &dyn CaptionProvider,
) -> Result<PseudoQuery, QueryGenError> {
    let (row_lo, row_hi) = moment_frame_range(moment, features)?;
    let middle = (row_lo + row_hi) / 2;
    let response = provider
        .caption(&CaptionRequest {
            video_id: moment.video_id.clone(),
            frame_row: middle,
            frame_features: Some(features.row(middle).to_vec()),
            image_ref: None,
        })
        .map_err(|e| generation_err(moment, e))?;
    let mut caption = response.caption.trim().to_string();
    if caption.is_empty() {
        return Err(generation_err(moment, "empty caption"));
    }
    if !caption.ends_with(['.', '!', '?']) {
        caption.push('.');
    }
    Ok(PseudoQuery {
        query_id: query_id.into(),
        moment: moment.clone(),
        modality: Modality::Visual,
        text: format!("{} {}", render_character_template(chars), caption),
    })
}

/// Compose the textual query: summarize the moment's dialog, one
/// `Speaker: utterance` turn per cue.
pub fn textual_pseudo_query(
    query_id: impl Into<String>,
    moment: &TemporalMoment,
    track: &SubtitleTrack,
    provider: &dyn SummaryProvider,
) -> Result<PseudoQuery, QueryGenError> {
    let cues = track
        .cue_range(moment.cue_start_idx, moment.cue_end_idx)
        .ok_or(QueryGenError::InvalidMoment {
            start: moment.cue_start_idx,
            end: moment.cue_end_idx,
            n: track.len(),
        })?;
    let dialog: Vec<DialogTurn> = cues
        .iter()
        .map(|cue| DialogTurn {
            speaker: cue.speaker.clone().unwrap_or_else(|| "UNKNOWN".to_string()),
            text: cue.text.clone(),
        })
        .collect();
    let response = provider
        .summarize(&SummaryRequest { dialog })
        .map_err(|e| generation_err(moment, e))?;
    let summary = response.summary.trim().to_string();
    if summary.is_empty() {
        return Err(generation_err(moment, "empty summary"));
    }
    Ok(PseudoQuery {
        query_id: query_id.into(),
        moment: moment.clone(),
        modality: Modality::Textual,
        text: summary,
    })
}

/// Baseline query: raw cue texts joined by single spaces.
pub fn dialog_baseline_query(
    query_id: impl Into<String>,
    moment: &TemporalMoment,
    track: &SubtitleTrack,
) -> Result<PseudoQuery, QueryGenError> {
    let cues = track
        .cue_range(moment.cue_start_idx, moment.cue_end_idx)
        .ok_or(QueryGenError::InvalidMoment {
            start: moment.cue_start_idx,
            end: moment.cue_end_idx,
            n: track.len(),
        })?;
    let text = cues
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(PseudoQuery {
        query_id: query_id.into(),
        moment: moment.clone(),
        modality: Modality::Dialog,
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub modalities: Vec<Modality>,
    /// Include speaker names in visual queries (ablation switch).
    pub include_speaker: bool,
    pub max_in_flight: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            modalities: vec![Modality::Visual, Modality::Textual],
            include_speaker: true,
            max_in_flight: 8,
        }
    }
}

/// Moment-length and character-count statistics of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub moment_count: usize,
    pub query_count: usize,
    pub failed_moments: usize,
    pub mean_moment_length_s: f64,
    /// Histogram of moment lengths in `length_bin_s`-wide bins; the last bin
    /// is open-ended.
    pub moment_length_histogram: Vec<usize>,
    pub length_bin_s: f64,
    /// Moments per number of distinct characters.
    pub character_count_histogram: BTreeMap<usize, usize>,
    /// Mean words per query, per modality.
    pub mean_words_per_query: BTreeMap<String, f64>,
}

const LENGTH_BINS: usize = 15;
const LENGTH_BIN_S: f64 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct GenFailure {
    pub video_id: String,
    pub cue_start: usize,
    pub cue_end: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct GeneratedDataset {
    pub queries: Vec<PseudoQuery>,
    pub stats: DatasetStats,
    pub failures: Vec<GenFailure>,
}

/// Generate the requested modalities for an explicit moment list.
///
/// Moments run through the providers with at most `max_in_flight` worker
/// threads; output is canonicalized by (video id, per-video moment ordinal,
/// modality) so parallelism never changes artifacts. Individual provider
/// failures skip the moment; the run fails once more than 10% of moments
/// error.
pub fn generate_for_moments(
    corpus: &CorpusIndex,
    moments: &[TemporalMoment],
    providers: &Providers,
    opts: &GenerateOptions,
) -> Result<GeneratedDataset, QueryGenError> {
    let mut modalities = opts.modalities.clone();
    modalities.sort();
    modalities.dedup();

    // Per-video ordinal in input order; also the query-id namespace.
    let mut per_video = BTreeMap::<String, usize>::new();
    let indexed: Vec<(usize, &TemporalMoment)> = moments
        .iter()
        .map(|m| {
            let slot = per_video.entry(m.video_id.clone()).or_insert(0);
            let ordinal = *slot;
            *slot += 1;
            (ordinal, m)
        })
        .collect();

    type MomentOutput = Result<(Vec<PseudoQuery>, usize), QueryGenError>;
    let outputs: Vec<MomentOutput> = bounded_map(&indexed, opts.max_in_flight, |_, (ordinal, m)| {
        let record = corpus
            .get(&m.video_id)
            .ok_or_else(|| QueryGenError::UnknownVideo(m.video_id.clone()))?;
        let chars = extract_characters(&record.track, m, opts.include_speaker)?;
        // Character histogram counts real speakers even under the ablation.
        let full_chars = extract_characters(&record.track, m, true)?;
        let mut queries = Vec::with_capacity(modalities.len());
        for modality in &modalities {
            let query_id = format!("{}:m{ordinal:04}:{modality}", m.video_id);
            let q = match modality {
                Modality::Visual => {
                    visual_pseudo_query(query_id, m, &record.visual, &chars, providers.caption.as_ref())?
                }
                Modality::Textual => {
                    textual_pseudo_query(query_id, m, &record.track, providers.summary.as_ref())?
                }
                Modality::Dialog => dialog_baseline_query(query_id, m, &record.track)?,
            };
            queries.push(q);
        }
        Ok((queries, full_chars.len()))
    });

    let mut queries = Vec::new();
    let mut failures = Vec::new();
    let mut char_hist = BTreeMap::<usize, usize>::new();
    for ((_, m), output) in indexed.iter().zip(outputs) {
        match output {
            Ok((qs, n_chars)) => {
                queries.extend(qs);
                *char_hist.entry(n_chars).or_insert(0) += 1;
            }
            Err(e) => failures.push(GenFailure {
                video_id: m.video_id.clone(),
                cue_start: m.cue_start_idx,
                cue_end: m.cue_end_idx,
                reason: e.to_string(),
            }),
        }
    }
    if !moments.is_empty() && failures.len() * 10 > moments.len() {
        return Err(QueryGenError::FailureBudget {
            failed: failures.len(),
            total: moments.len(),
        });
    }
    queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut length_hist = vec![0usize; LENGTH_BINS];
    let mut length_sum = 0.0;
    for m in moments {
        let len = m.duration_s();
        length_sum += len;
        let bin = ((len / LENGTH_BIN_S).floor() as usize).min(LENGTH_BINS - 1);
        length_hist[bin] += 1;
    }
    let mut words_sum = BTreeMap::<String, (usize, usize)>::new();
    for q in &queries {
        let entry = words_sum.entry(q.modality.to_string()).or_insert((0, 0));
        entry.0 += q.text.split_whitespace().count();
        entry.1 += 1;
    }
    let stats = DatasetStats {
        moment_count: moments.len(),
        query_count: queries.len(),
        failed_moments: failures.len(),
        mean_moment_length_s: if moments.is_empty() {
            0.0
        } else {
            length_sum / moments.len() as f64
        },
        moment_length_histogram: length_hist,
        length_bin_s: LENGTH_BIN_S,
        character_count_histogram: char_hist,
        mean_words_per_query: words_sum
            .into_iter()
            .map(|(k, (words, n))| (k, words as f64 / n.max(1) as f64))
            .collect(),
    };
    Ok(GeneratedDataset {
        queries,
        stats,
        failures,
    })
}

/// Sample moments for the whole corpus, then generate queries for them.
pub fn generate_dataset(
    corpus: &CorpusIndex,
    sampler_cfg: &SamplerConfig,
    providers: &Providers,
    opts: &GenerateOptions,
) -> Result<(Vec<TemporalMoment>, GeneratedDataset), QueryGenError> {
    sampler_cfg.validate()?;
    let moments = sample_corpus_moments(corpus, sampler_cfg);
    let dataset = generate_for_moments(corpus, &moments, providers, opts)?;
    Ok((moments, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SubtitleCue;
    use crate::providers::{ProviderError, StubProvider, SummaryResponse};

    fn names(list: &[&str]) -> CharacterSet {
        CharacterSet::from_names(list.iter().map(|s| s.to_string()))
    }

    #[test]
    fn template_matches_reference_strings() {
        assert_eq!(render_character_template(&names(&[])), "Someone is speaking.");
        assert_eq!(
            render_character_template(&names(&["Monica"])),
            "Monica is speaking."
        );
        assert_eq!(
            render_character_template(&names(&["Monica", "Ross"])),
            "Monica and Ross are talking together."
        );
        assert_eq!(
            render_character_template(&names(&["Phoebe", "Rachel", "Monica"])),
            "Phoebe, Rachel and Monica are talking together."
        );
    }

    fn test_track() -> SubtitleTrack {
        let mk = |i: usize, speaker: Option<&str>, text: &str| SubtitleCue {
            index: i,
            start_s: i as f64 * 3.0,
            end_s: i as f64 * 3.0 + 2.0,
            speaker: speaker.map(|s| s.to_string()),
            text: text.to_string(),
        };
        SubtitleTrack::new(
            "v",
            vec![
                mk(1, Some("MONICA"), "I got the job!"),
                mk(2, Some("ROSS"), "That is great news."),
                mk(3, Some("monica"), "I know!"),
                mk(4, None, "Wow."),
            ],
        )
        .unwrap()
    }

    fn moment(start: usize, end: usize) -> TemporalMoment {
        let track = test_track();
        TemporalMoment {
            video_id: "v".into(),
            cue_start_idx: start,
            cue_end_idx: end,
            ts_s: track.cues[start - 1].start_s,
            te_s: track.cues[end - 1].end_s,
        }
    }

    #[test]
    fn characters_deduplicate_case_insensitively_in_order() {
        let track = test_track();
        let set = extract_characters(&track, &moment(1, 3), true).unwrap();
        assert_eq!(set.names(), &["Monica".to_string(), "Ross".to_string()]);
    }

    #[test]
    fn ablation_flag_empties_the_set() {
        let track = test_track();
        let set = extract_characters(&track, &moment(1, 3), false).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn speakerless_cues_give_empty_set() {
        let track = test_track();
        let set = extract_characters(&track, &moment(4, 4), true).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn textual_query_uses_longest_utterance_stub() {
        let track = test_track();
        let stub = StubProvider::new(None);
        let q = textual_pseudo_query("q", &moment(1, 1), &track, &stub).unwrap();
        assert_eq!(q.text, "MONICA: I got the job!");
        assert_eq!(q.modality, Modality::Textual);
    }

    struct EmptySummarizer;
    impl SummaryProvider for EmptySummarizer {
        fn summarize(&self, _req: &SummaryRequest) -> Result<SummaryResponse, ProviderError> {
            Ok(SummaryResponse {
                summary: "  ".into(),
            })
        }
    }

    #[test]
    fn empty_summary_is_rejected() {
        let track = test_track();
        let err = textual_pseudo_query("q", &moment(1, 2), &track, &EmptySummarizer).unwrap_err();
        assert!(err.to_string().contains("empty summary"), "{err}");
    }

    #[test]
    fn dialog_baseline_concatenates_cues() {
        let track = test_track();
        let q = dialog_baseline_query("q", &moment(1, 2), &track).unwrap();
        assert_eq!(q.text, "I got the job! That is great news.");
        let single = dialog_baseline_query("q", &moment(3, 3), &track).unwrap();
        assert_eq!(single.text, "I know!");
    }

    struct IdentitySummarizer;
    impl SummaryProvider for IdentitySummarizer {
        fn summarize(&self, req: &SummaryRequest) -> Result<SummaryResponse, ProviderError> {
            Ok(SummaryResponse {
                summary: req
                    .dialog
                    .iter()
                    .map(|t| t.text.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            })
        }
    }

    #[test]
    fn identity_summarizer_reduces_textual_to_dialog_baseline() {
        let track = test_track();
        let m = moment(1, 3);
        let textual = textual_pseudo_query("q", &m, &track, &IdentitySummarizer).unwrap();
        let baseline = dialog_baseline_query("q", &m, &track).unwrap();
        assert_eq!(textual.text, baseline.text);
    }
}
