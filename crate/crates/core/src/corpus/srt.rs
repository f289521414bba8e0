//! SRT subtitle parsing and serialization.
//!
//! Narrative-video subtitles frequently tag the speaker as a `NAME: text`
//! prefix on the cue text; [`SpeakerConvention::PrefixColon`] lifts that tag
//! into the structured speaker field.

use super::{CorpusError, SubtitleCue, SubtitleTrack};

/// How speaker names are encoded in cue text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerConvention {
    /// Split `NAME: text` at the first colon-space when NAME looks like an
    /// identifier (letters, digits and spaces, at most 30 chars).
    PrefixColon,
    /// Leave cue text untouched; no speaker extraction.
    None,
}

const MAX_SPEAKER_LEN: usize = 30;

fn valid_speaker_name(candidate: &str) -> bool {
    let trimmed = candidate.trim();
    !trimmed.is_empty()
        && trimmed.len() <= MAX_SPEAKER_LEN
        && trimmed
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == ' ')
}

/// Split a speaker prefix off cue text according to the convention.
/// Returns `(speaker, remaining_text)`.
pub(crate) fn split_speaker(text: &str, convention: SpeakerConvention) -> (Option<String>, String) {
    if convention == SpeakerConvention::None {
        return (None, text.to_string());
    }
    if let Some(pos) = text.find(": ") {
        let candidate = &text[..pos];
        let rest = text[pos + 2..].trim();
        if valid_speaker_name(candidate) && !rest.is_empty() {
            return (Some(candidate.trim().to_string()), rest.to_string());
        }
    }
    (None, text.to_string())
}

fn parse_timestamp(s: &str) -> Option<f64> {
    // HH:MM:SS,mmm (comma is canonical for SRT; accept a dot as well).
    let s = s.trim();
    let (hms, millis) = s.split_once(',').or_else(|| s.split_once('.'))?;
    let mut parts = hms.split(':');
    let h: u64 = parts.next()?.trim().parse().ok()?;
    let m: u64 = parts.next()?.trim().parse().ok()?;
    let sec: u64 = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() || m >= 60 || sec >= 60 || millis.len() != 3 {
        return None;
    }
    let ms: u64 = millis.trim().parse().ok()?;
    // One division of total milliseconds, so format/parse round-trips are
    // bit-exact on millisecond-quantized times.
    let total_ms = h * 3_600_000 + m * 60_000 + sec * 1000 + ms;
    Some(total_ms as f64 / 1000.0)
}

fn format_timestamp(seconds: f64) -> String {
    let total_ms = (seconds * 1000.0).round() as u64;
    let ms = total_ms % 1000;
    let s = (total_ms / 1000) % 60;
    let m = (total_ms / 60_000) % 60;
    let h = total_ms / 3_600_000;
    format!("{h:02}:{m:02}:{s:02},{ms:03}")
}

/// Parse an SRT file into a subtitle track.
///
/// Cues keep file order and are re-numbered 1..n; text lines within a block
/// are joined with single spaces. Blocks whose text is empty after trimming
/// are skipped.
pub fn parse_srt(
    video_id: &str,
    bytes: &[u8],
    convention: SpeakerConvention,
) -> Result<SubtitleTrack, CorpusError> {
    let text = String::from_utf8_lossy(bytes);
    if text.trim().is_empty() {
        return Err(CorpusError::EmptySubtitles);
    }
    let mut cues = Vec::new();
    let mut block_no = 0usize;
    // Blocks are separated by blank lines; tolerate CRLF via trim.
    let mut lines = text.lines().peekable();
    while lines.peek().is_some() {
        // Skip blank separators.
        while matches!(lines.peek(), Some(l) if l.trim().is_empty()) {
            lines.next();
        }
        let Some(first) = lines.next() else { break };
        block_no += 1;
        let first = first.trim_start_matches('\u{feff}').trim();
        // The ordinal line is optional in the wild; a block may start with
        // the timestamp line directly.
        let ts_line = if first.contains("-->") {
            first.to_string()
        } else {
            if first.parse::<u64>().is_err() {
                return Err(CorpusError::Srt {
                    block: block_no,
                    reason: format!("expected ordinal or timestamp line, got {first:?}"),
                });
            }
            match lines.next() {
                Some(l) => l.trim().to_string(),
                None => {
                    return Err(CorpusError::Srt {
                        block: block_no,
                        reason: "block ends before timestamp line".into(),
                    })
                }
            }
        };
        let (start_raw, end_raw) = ts_line.split_once("-->").ok_or_else(|| CorpusError::Srt {
            block: block_no,
            reason: format!("missing '-->' in timestamp line {ts_line:?}"),
        })?;
        let start_s = parse_timestamp(start_raw).ok_or_else(|| CorpusError::Srt {
            block: block_no,
            reason: format!("malformed timestamp {:?}", start_raw.trim()),
        })?;
        let end_s = parse_timestamp(end_raw).ok_or_else(|| CorpusError::Srt {
            block: block_no,
            reason: format!("malformed timestamp {:?}", end_raw.trim()),
        })?;
        let mut text_lines = Vec::new();
        while let Some(l) = lines.peek() {
            if l.trim().is_empty() {
                break;
            }
            text_lines.push(lines.next().unwrap().trim().to_string());
        }
        let joined = text_lines.join(" ").trim().to_string();
        if joined.is_empty() {
            continue;
        }
        if end_s <= start_s {
            return Err(CorpusError::Srt {
                block: block_no,
                reason: format!("end {end_s} not after start {start_s}"),
            });
        }
        let (speaker, body) = split_speaker(&joined, convention);
        cues.push(SubtitleCue {
            index: cues.len() + 1,
            start_s,
            end_s,
            speaker,
            text: body,
        });
    }
    if cues.is_empty() {
        return Err(CorpusError::EmptySubtitles);
    }
    SubtitleTrack::new(video_id, cues)
}

/// Serialize a track as SRT, re-attaching speakers as `NAME: text` prefixes.
pub fn write_srt(track: &SubtitleTrack) -> String {
    let mut out = String::new();
    for cue in &track.cues {
        out.push_str(&format!(
            "{}\n{} --> {}\n",
            cue.index,
            format_timestamp(cue.start_s),
            format_timestamp(cue.end_s)
        ));
        match &cue.speaker {
            Some(name) => out.push_str(&format!("{}: {}\n\n", name, cue.text)),
            None => out.push_str(&format!("{}\n\n", cue.text)),
        }
    }
    out
}
