//! Caption and summarization providers behind one client contract.
//!
//! Pseudo-query generation needs an image captioner and a dialog summarizer.
//! Both are external models in production; here they sit behind small traits
//! with two implementations: deterministic offline stubs (the default, used
//! for CI and the synthetic corpus) and a JSON-over-HTTP client so real
//! serving stacks can be wrapped with a one-file adapter.
//!
//! HTTP contract: `POST /v1/caption` and `POST /v1/summarize`, JSON bodies
//! mirroring [`CaptionRequest`] / [`SummaryRequest`]. 4xx responses are
//! permanent failures, 5xx and transport errors are retried with exponential
//! backoff starting at 0.5 s. Requests carry a deterministic
//! `x-request-id` derived from the body so retries are idempotent.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::synth::TopicVocab;
use crate::util::stable_hash64;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("permanent provider failure (status {status}): {message}")]
    Permanent { status: u16, message: String },
    #[error("provider failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("provider contract violation: {0}")]
    Contract(String),
    #[error("provider config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mode: ProviderMode::Stub,
            base_url: None,
            timeout_s: 10.0,
            max_retries: 2,
            max_in_flight: 8,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.timeout_s > 0.0) {
            return Err(ProviderError::Config("timeout_s must be positive".into()));
        }
        if self.mode == ProviderMode::Http && self.base_url.is_none() {
            return Err(ProviderError::Config("http mode requires base_url".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub video_id: String,
    pub frame_row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_features: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl CaptionRequest {
    fn validate(&self) -> Result<(), ProviderError> {
        match (&self.frame_features, &self.image_ref) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(ProviderError::InvalidRequest(
                "exactly one of frame_features or image_ref must be present".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogTurn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRequest {
    pub dialog: Vec<DialogTurn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub summary: String,
}

pub trait CaptionProvider: Send + Sync {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, ProviderError>;
}

pub trait SummaryProvider: Send + Sync {
    fn summarize(&self, req: &SummaryRequest) -> Result<SummaryResponse, ProviderError>;
}

/// Deterministic offline providers.
///
/// Captioning decodes the planted topic of a synthetic frame (argmax feature
/// dimension) and renders `"A scene about {topic words}."`; without a vocab
/// it falls back to a fixed sentence. Summarization picks the longest
/// utterance and prefixes its speaker.
pub struct StubProvider {
    vocab: Option<TopicVocab>,
}

impl StubProvider {
    pub fn new(vocab: Option<TopicVocab>) -> Self {
        StubProvider { vocab }
    }
}

const FALLBACK_CAPTION: &str = "A scene unfolds on screen.";

impl CaptionProvider for StubProvider {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, ProviderError> {
        req.validate()?;
        let caption = match (&self.vocab, &req.frame_features) {
            (Some(vocab), Some(features)) if !features.is_empty() => {
                let scan = features.len().min(vocab.n_topics());
                let mut best = 0usize;
                for d in 1..scan {
                    if features[d] > features[best] {
                        best = d;
                    }
                }
                format!("A scene about {}.", vocab.words_for(best).join(" "))
            }
            _ => FALLBACK_CAPTION.to_string(),
        };
        Ok(CaptionResponse { caption })
    }
}

impl SummaryProvider for StubProvider {
    fn summarize(&self, req: &SummaryRequest) -> Result<SummaryResponse, ProviderError> {
        if req.dialog.is_empty() {
            return Err(ProviderError::InvalidRequest("dialog must be non-empty".into()));
        }
        let longest = req
            .dialog
            .iter()
            .max_by_key(|turn| turn.text.chars().count())
            .unwrap();
        Ok(SummaryResponse {
            summary: format!("{}: {}", longest.speaker, longest.text),
        })
    }
}

const BACKOFF_BASE: Duration = Duration::from_millis(500);

/// JSON-over-HTTP client with retry and deterministic request ids.
pub struct HttpProviderClient {
    agent: ureq::Agent,
    base_url: String,
    max_retries: u32,
    backoff_base: Duration,
}

impl HttpProviderClient {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let base_url = cfg
            .base_url
            .clone()
            .ok_or_else(|| ProviderError::Config("http mode requires base_url".into()))?;
        let agent_cfg = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build();
        Ok(HttpProviderClient {
            agent: agent_cfg.into(),
            base_url,
            max_retries: cfg.max_retries,
            backoff_base: BACKOFF_BASE,
        })
    }

    /// Override the retry backoff base; test servers use short delays.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn post_json<B: Serialize, R: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, ProviderError> {
        let url = format!("{}{}", self.base_url.trim_end_matches('/'), path);
        let payload = serde_json::to_string(body)
            .map_err(|e| ProviderError::InvalidRequest(format!("unserializable body: {e}")))?;
        let request_id = format!("{:016x}", stable_hash64(payload.as_bytes()));
        let mut attempt: u32 = 0;
        loop {
            let outcome = self
                .agent
                .post(&url)
                .header("content-type", "application/json")
                .header("x-request-id", &request_id)
                .send(payload.as_str());
            let last_error = match outcome {
                Ok(mut res) => {
                    let status = res.status().as_u16();
                    if (200..300).contains(&status) {
                        return res.body_mut().read_json::<R>().map_err(|e| {
                            ProviderError::Contract(format!("unreadable response body: {e}"))
                        });
                    }
                    if (400..500).contains(&status) {
                        let message = res
                            .body_mut()
                            .read_to_string()
                            .unwrap_or_else(|_| String::new());
                        return Err(ProviderError::Permanent { status, message });
                    }
                    format!("status {status}")
                }
                Err(e) => e.to_string(),
            };
            if attempt >= self.max_retries {
                return Err(ProviderError::Exhausted {
                    attempts: attempt + 1,
                    last: last_error,
                });
            }
            std::thread::sleep(self.backoff_base * 2u32.pow(attempt));
            attempt += 1;
        }
    }
}

impl CaptionProvider for HttpProviderClient {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, ProviderError> {
        req.validate()?;
        let res: CaptionResponse = self.post_json("/v1/caption", req)?;
        if res.caption.trim().is_empty() {
            return Err(ProviderError::Contract("empty caption".into()));
        }
        Ok(res)
    }
}

impl SummaryProvider for HttpProviderClient {
    fn summarize(&self, req: &SummaryRequest) -> Result<SummaryResponse, ProviderError> {
        if req.dialog.is_empty() {
            return Err(ProviderError::InvalidRequest("dialog must be non-empty".into()));
        }
        let res: SummaryResponse = self.post_json("/v1/summarize", req)?;
        if res.summary.trim().is_empty() {
            return Err(ProviderError::Contract("empty summary".into()));
        }
        Ok(res)
    }
}

/// A caption and a summary provider bundled for the generation pipeline.
pub struct Providers {
    pub caption: Box<dyn CaptionProvider>,
    pub summary: Box<dyn SummaryProvider>,
}

impl Providers {
    pub fn stub(vocab: Option<TopicVocab>) -> Self {
        Providers {
            caption: Box::new(StubProvider::new(vocab.clone())),
            summary: Box::new(StubProvider::new(vocab)),
        }
    }

    pub fn from_config(
        cfg: &ProviderConfig,
        vocab: Option<TopicVocab>,
    ) -> Result<Self, ProviderError> {
        cfg.validate()?;
        match cfg.mode {
            ProviderMode::Stub => Ok(Providers::stub(vocab)),
            ProviderMode::Http => Ok(Providers {
                caption: Box::new(HttpProviderClient::new(cfg)?),
                summary: Box::new(HttpProviderClient::new(cfg)?),
            }),
        }
    }
}

/// Run `f` over `items` with at most `limit` worker threads, preserving
/// input order in the result.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    if items.is_empty() {
        return Vec::new();
    }
    let workers = limit.max(1).min(items.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}
