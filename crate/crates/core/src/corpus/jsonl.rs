//! JSONL subtitle track format: one cue object per line.

use serde::{Deserialize, Serialize};

use super::{CorpusError, SubtitleCue, SubtitleTrack};

/// Wire format for one cue line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CueRecord {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub speaker: Option<String>,
    pub text: String,
}

/// Parse a JSONL subtitle track. Cues are stable-sorted by start time and
/// re-indexed 1..n; all lines must share one video id.
pub fn parse_jsonl_track<'a, I>(lines: I) -> Result<SubtitleTrack, CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut video_id: Option<String> = None;
    let mut cues: Vec<SubtitleCue> = Vec::new();
    for (line_no, line) in lines.into_iter().enumerate() {
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CueRecord = serde_json::from_str(line).map_err(|e| CorpusError::Jsonl {
            line: line_no,
            reason: e.to_string(),
        })?;
        match &video_id {
            None => video_id = Some(rec.video_id.clone()),
            Some(expected) if *expected != rec.video_id => {
                return Err(CorpusError::MixedVideoIds {
                    expected: expected.clone(),
                    found: rec.video_id,
                });
            }
            _ => {}
        }
        cues.push(SubtitleCue {
            index: rec.index.unwrap_or(0),
            start_s: rec.start,
            end_s: rec.end,
            speaker: rec.speaker,
            text: rec.text,
        });
    }
    let video_id = video_id.ok_or(CorpusError::EmptySubtitles)?;
    cues.sort_by(|a, b| a.start_s.partial_cmp(&b.start_s).expect("finite start times"));
    for (i, cue) in cues.iter_mut().enumerate() {
        cue.index = i + 1;
    }
    SubtitleTrack::new(video_id, cues)
}

/// Serialize a track to JSONL lines.
pub fn write_jsonl_track(track: &SubtitleTrack) -> String {
    let mut out = String::new();
    for cue in &track.cues {
        let rec = CueRecord {
            video_id: track.video_id.clone(),
            index: Some(cue.index),
            start: cue.start_s,
            end: cue.end_s,
            speaker: cue.speaker.clone(),
            text: cue.text.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("cue serializes"));
        out.push('\n');
    }
    out
}
