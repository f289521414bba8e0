//! Synthetic desk-scale corpus with planted query–moment alignments.
//!
//! Each video is a sequence of latent scenes. A scene has a corpus-unique
//! topic id; its visual feature rows are a scaled one-hot of the topic plus
//! Gaussian noise, its cues are composed of topic words plus fillers, and one
//! annotated query per scene carries the topic words and the scene's true
//! interval. Lexical and feature alignment are therefore learnable — a
//! nearest-centroid match from query topic to scene feature means recovers
//! the planted structure — and tests exploit exactly that.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedQuery, CorpusError, CorpusIndex, FeatureMatrix, SubtitleCue, SubtitleTrack, VideoRecord};

const SYLLABLES_A: [&str; 12] = [
    "ba", "de", "ki", "lo", "mu", "na", "po", "ra", "su", "ti", "vo", "ze",
];
const SYLLABLES_B: [&str; 12] = [
    "ren", "tol", "mak", "vin", "sor", "pel", "dun", "gar", "lim", "hos", "fet", "wyn",
];
const FILLERS: [&str; 12] = [
    "well", "okay", "right", "you", "know", "so", "look", "come", "on", "what", "now", "really",
];
const CAST: [&str; 8] = [
    "Alice", "Victor", "Mona", "Felix", "Ruth", "Oscar", "Nina", "Hugo",
];
const WORDS_PER_TOPIC: usize = 3;
const FEATURE_SCALE: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    /// Inclusive range of cue counts per video.
    pub cues_per_video: (usize, usize),
    pub scenes_per_video: usize,
    pub topic_vocab_size: usize,
    pub feature_dims: usize,
    /// Gaussian noise sigma on feature rows.
    pub noise_sigma: f32,
    /// Seconds per feature row.
    pub stride_s: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_videos: 50,
            cues_per_video: (15, 20),
            scenes_per_video: 5,
            topic_vocab_size: 250,
            feature_dims: 256,
            noise_sigma: 0.1,
            stride_s: 1.5,
        }
    }
}

impl SynthConfig {
    /// Scenes carry corpus-unique topics, so the whole corpus needs this
    /// many.
    pub fn scenes_total(&self) -> usize {
        self.n_videos * self.scenes_per_video
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Synth(m.to_string()));
        if self.n_videos == 0 {
            return fail("need at least one video");
        }
        if self.scenes_per_video == 0 {
            return fail("need at least one scene per video");
        }
        if self.topic_vocab_size < self.scenes_total() {
            return fail("topic vocab smaller than scenes requested");
        }
        if self.topic_vocab_size * WORDS_PER_TOPIC
            > SYLLABLES_A.len() * SYLLABLES_B.len() * SYLLABLES_A.len()
        {
            return fail("topic vocab exceeds the synthetic word space");
        }
        if self.feature_dims < self.topic_vocab_size {
            return fail("feature dims must cover one dimension per topic");
        }
        if self.cues_per_video.0 < self.scenes_per_video
            || self.cues_per_video.0 > self.cues_per_video.1
        {
            return fail("cue count range must be non-empty and allow one cue per scene");
        }
        Ok(())
    }
}

/// The generator's word inventory: per-topic words, fillers, speaker cast.
/// Persisted next to synthetic corpora so offline providers can decode
/// planted topics from feature vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicVocab {
    pub topics: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    pub cast: Vec<String>,
}

impl TopicVocab {
    pub fn build(n_topics: usize) -> Self {
        let topics = (0..n_topics)
            .map(|t| {
                (0..WORDS_PER_TOPIC)
                    .map(|j| {
                        let idx = t * WORDS_PER_TOPIC + j;
                        format!(
                            "{}{}{}",
                            SYLLABLES_A[idx % 12],
                            SYLLABLES_B[(idx / 12) % 12],
                            SYLLABLES_A[(idx / 144) % 12]
                        )
                    })
                    .collect()
            })
            .collect();
        TopicVocab {
            topics,
            fillers: FILLERS.iter().map(|s| s.to_string()).collect(),
            cast: CAST.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn words_for(&self, topic: usize) -> &[String] {
        &self.topics[topic]
    }

    pub fn topic_of_word(&self, word: &str) -> Option<usize> {
        self.topics
            .iter()
            .position(|ws| ws.iter().any(|w| w == word))
    }

    /// Every word the generator can emit (topic words, fillers, cast names,
    /// query scaffolding). Used to bound hash collisions in the embedder.
    pub fn all_words(&self) -> Vec<String> {
        let mut words: Vec<String> = self
            .topics
            .iter()
            .flatten()
            .cloned()
            .chain(self.fillers.iter().cloned())
            .chain(self.cast.iter().map(|c| c.to_lowercase()))
            .collect();
        for w in ["and", "talk", "talks", "about", "a", "scene"] {
            words.push(w.to_string());
        }
        words.sort();
        words.dedup();
        words
    }
}

/// A generated corpus plus its planted ground truth.
#[derive(Debug)]
pub struct SynthOutput {
    pub corpus: CorpusIndex,
    pub annotated: Vec<AnnotatedQuery>,
    pub vocab: TopicVocab,
}

struct SceneSpan {
    topic: usize,
    start_s: f64,
    end_s: f64,
    speakers: Vec<String>,
}

/// Generate a synthetic corpus. Pure function of the config: identical
/// configs produce identical corpora.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthOutput, CorpusError> {
    cfg.validate()?;
    let vocab = TopicVocab::build(cfg.topic_vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0f64, (cfg.noise_sigma as f64).max(1e-12)).expect("valid sigma");
    let stride = cfg.stride_s as f64;

    let mut corpus = CorpusIndex::new();
    let mut annotated = Vec::new();

    for vi in 0..cfg.n_videos {
        let video_id = format!("synth_{vi:04}");
        // Consecutive corpus-unique topics; scene -> video is unambiguous.
        let topic_ids: Vec<usize> = (vi * cfg.scenes_per_video..(vi + 1) * cfg.scenes_per_video)
            .collect();
        let n_cues = rng.gen_range(cfg.cues_per_video.0..=cfg.cues_per_video.1);
        let base = n_cues / cfg.scenes_per_video;
        let rem = n_cues % cfg.scenes_per_video;

        let mut cues: Vec<SubtitleCue> = Vec::with_capacity(n_cues);
        let mut cue_scene: Vec<usize> = Vec::with_capacity(n_cues);
        let mut scenes: Vec<SceneSpan> = Vec::with_capacity(cfg.scenes_per_video);
        let mut t = rng.gen_range(0.2..0.8);
        for (si, &topic) in topic_ids.iter().enumerate() {
            let scene_cues = base + usize::from(si < rem);
            let scene_start = t;
            let mut speakers: Vec<String> = Vec::new();
            for _ in 0..scene_cues {
                let dur = rng.gen_range(2.4..3.4);
                let speaker = vocab.cast.choose(&mut rng).unwrap().clone();
                if !speakers.contains(&speaker) {
                    speakers.push(speaker.clone());
                }
                let n_tokens = rng.gen_range(4..=8);
                let mut tokens = Vec::with_capacity(n_tokens);
                for ti in 0..n_tokens {
                    if ti == 0 || rng.gen_bool(0.7) {
                        tokens.push(vocab.words_for(topic)[rng.gen_range(0..WORDS_PER_TOPIC)].clone());
                    } else {
                        tokens.push(vocab.fillers.choose(&mut rng).unwrap().clone());
                    }
                }
                cues.push(SubtitleCue {
                    index: cues.len() + 1,
                    start_s: t,
                    end_s: t + dur,
                    speaker: Some(speaker),
                    text: tokens.join(" "),
                });
                cue_scene.push(si);
                t += dur + rng.gen_range(0.1..0.3);
            }
            let scene_end = cues.last().map(|c| c.end_s).unwrap_or(scene_start);
            scenes.push(SceneSpan {
                topic,
                start_s: scene_start,
                end_s: scene_end,
                speakers,
            });
            t += rng.gen_range(0.8..1.6);
        }
        let duration_s = cues.last().map(|c| c.end_s).unwrap_or(0.0) + rng.gen_range(0.5..1.5);
        let rows = (duration_s / stride).ceil() as usize;

        // Visual stream: scene topic one-hot plus noise per row.
        let mut visual = vec![0f32; rows * cfg.feature_dims];
        for r in 0..rows {
            let mid = (r as f64 + 0.5) * stride;
            let scene = scenes
                .iter()
                .find(|s| mid >= s.start_s && mid <= s.end_s)
                .map(|s| s.topic);
            for d in 0..cfg.feature_dims {
                let mut v = noise.sample(&mut rng) as f32;
                if scene == Some(d) {
                    v += FEATURE_SCALE;
                }
                visual[r * cfg.feature_dims + d] = v;
            }
        }

        // Subtitle stream: each cue gets one embedding (topic one-hot plus
        // noise) replicated into every feature step it overlaps.
        let mut cue_embed: Vec<Vec<f32>> = Vec::with_capacity(cues.len());
        for (ci, _cue) in cues.iter().enumerate() {
            let topic = scenes[cue_scene[ci]].topic;
            let mut e = vec![0f32; cfg.feature_dims];
            for (d, slot) in e.iter_mut().enumerate() {
                *slot = noise.sample(&mut rng) as f32 + if d == topic { FEATURE_SCALE } else { 0.0 };
            }
            cue_embed.push(e);
        }
        let mut subtitle = vec![0f32; rows * cfg.feature_dims];
        for r in 0..rows {
            let lo = r as f64 * stride;
            let hi = lo + stride;
            let mut best: Option<(f64, usize)> = None;
            for (ci, cue) in cues.iter().enumerate() {
                let overlap = cue.end_s.min(hi) - cue.start_s.max(lo);
                if overlap > 0.0 && best.map_or(true, |(b, _)| overlap > b) {
                    best = Some((overlap, ci));
                }
            }
            match best {
                Some((_, ci)) => {
                    subtitle[r * cfg.feature_dims..(r + 1) * cfg.feature_dims]
                        .copy_from_slice(&cue_embed[ci]);
                }
                None => {
                    for d in 0..cfg.feature_dims {
                        subtitle[r * cfg.feature_dims + d] = noise.sample(&mut rng) as f32;
                    }
                }
            }
        }

        for (si, scene) in scenes.iter().enumerate() {
            let words = vocab.words_for(scene.topic).join(" ");
            let text = match scene.speakers.as_slice() {
                [] => format!("someone talks about {words}"),
                [a] => format!("{a} talks about {words}"),
                [a, b, ..] => format!("{a} and {b} talk about {words}"),
            };
            annotated.push(AnnotatedQuery::new(
                format!("{video_id}:gt{si}"),
                video_id.clone(),
                scene.start_s,
                scene.end_s,
                text,
            )?);
        }

        let track = SubtitleTrack::new(video_id.clone(), cues)?;
        corpus.insert(VideoRecord {
            video_id: video_id.clone(),
            duration_s,
            track,
            visual: FeatureMatrix::new(&video_id, cfg.stride_s, rows, cfg.feature_dims, visual)?,
            subtitle_features: Some(FeatureMatrix::new(
                &video_id,
                cfg.stride_s,
                rows,
                cfg.feature_dims,
                subtitle,
            )?),
        })?;
    }

    Ok(SynthOutput {
        corpus,
        annotated,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SynthConfig {
            n_videos: 3,
            ..SynthConfig::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.annotated, b.annotated);
        assert_eq!(a.vocab, b.vocab);
    }

    #[test]
    fn one_annotated_query_per_scene() {
        let cfg = SynthConfig {
            n_videos: 50,
            scenes_per_video: 5,
            ..SynthConfig::default()
        };
        let out = synth_corpus(&cfg).unwrap();
        assert_eq!(out.annotated.len(), 250);
        assert_eq!(out.corpus.len(), 50);
    }

    #[test]
    fn vocab_smaller_than_scenes_is_rejected() {
        let cfg = SynthConfig {
            topic_vocab_size: 3,
            scenes_per_video: 5,
            ..SynthConfig::default()
        };
        let err = synth_corpus(&cfg).unwrap_err();
        assert!(matches!(err, CorpusError::Synth(m) if m.contains("vocab smaller")));
    }

    #[test]
    fn topic_words_are_unique() {
        let vocab = TopicVocab::build(40);
        let mut all: Vec<&String> = vocab.topics.iter().flatten().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
