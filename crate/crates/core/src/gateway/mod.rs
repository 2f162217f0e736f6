//! Uniform access to chat-completion, embedding and label-classification
//! endpoints.
//!
//! A [`Gateway`] wraps any [`Backend`] with bounded parallelism, capped
//! exponential retries, an append-only call log and optional replay of a
//! previous log so reruns do not hit the endpoint again.

mod http;
mod mock;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{MockBackend, Responder};

use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl DecodingParams {
    /// Task generation: sampling on, diversity matters.
    pub fn generation() -> Self {
        DecodingParams {
            temperature: 1.0,
            max_tokens: 1024,
            stop_sequences: Vec::new(),
        }
    }

    /// Checks and classification: greedy decoding for stable verdicts.
    pub fn deterministic(max_tokens: u32) -> Self {
        DecodingParams {
            temperature: 0.0,
            max_tokens,
            stop_sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} is not >= 0",
                self.temperature
            )));
        }
        if self.max_tokens < 1 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::generation()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    pub model_name: String,
    /// Model used for `/embeddings`; falls back to `model_name`.
    pub embedding_model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_parallel: usize,
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "task-designer".into(),
            embedding_model: None,
            api_key_env: None,
            max_parallel: 4,
            max_attempts: 3,
            base_backoff_ms: 500,
            timeout_ms: 120_000,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel < 1 {
            return Err(GatewayError::Config("max_parallel must be >= 1".into()));
        }
        if self.max_attempts < 1 {
            return Err(GatewayError::Config("max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            base_backoff: Duration::from_millis(self.base_backoff_ms),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("mock backend has no completion for prompt {prompt_hash}")]
    MockMiss { prompt_hash: String },
    #[error("completion {raw:?} matches none of {labels:?}")]
    UnrecognizedLabel { raw: String, labels: Vec<String> },
    #[error("embedding dimension changed from {expected} to {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Transport failures, rate limiting and server errors are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Endpoint { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

/// One endpoint implementation. Each call is a single attempt; retrying and
/// throttling belong to [`Gateway`].
pub trait Backend: Send + Sync {
    fn model_name(&self) -> &str;
    fn chat(&self, prompt: &str, params: &DecodingParams) -> Result<BackendReply, GatewayError>;
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
}

impl RetryPolicy {
    const MAX_BACKOFF: Duration = Duration::from_secs(30);

    /// Sleep before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32
            .checked_shl(attempt.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base_backoff
            .saturating_mul(factor)
            .min(Self::MAX_BACKOFF)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
        }
    }
}

/// Counting semaphore bounding requests in flight.
struct Slots {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(max: usize) -> Self {
        Slots {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock();
        while *used >= self.max {
            self.freed.wait(&mut used);
        }
        *used += 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CallResponse {
    Text(String),
    Embedding(Vec<f32>),
}

/// One line of the call log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    /// Hash over kind, model, decoding parameters and prompt; the replay key.
    pub key: String,
    pub prompt_hash: String,
    pub kind: CallKind,
    pub model: String,
    pub attempts: u32,
    pub latency_ms: u64,
    #[serde(default)]
    pub usage: Option<TokenUsage>,
    #[serde(default)]
    pub response: Option<CallResponse>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Append-only log of gateway calls, kept in memory and optionally mirrored
/// to a JSONL file.
pub struct CallLog {
    records: Mutex<Vec<CallRecord>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

impl CallLog {
    pub fn in_memory() -> Self {
        CallLog {
            records: Mutex::new(Vec::new()),
            sink: Mutex::new(None),
        }
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CallLog {
            records: Mutex::new(Vec::new()),
            sink: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    /// Reads a previously written log for replay.
    pub fn load(path: &Path) -> std::io::Result<Vec<CallRecord>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        crate::util::read_jsonl(path)
    }

    fn push(&self, record: CallRecord) {
        if let Some(w) = self.sink.lock().as_mut() {
            let line = serde_json::to_string(&record).expect("call record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log::warn!("failed to append call log: {e}");
            }
        }
        self.records.lock().push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().clone()
    }
}

/// Result of [`Gateway::classify`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    pub raw: String,
}

fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Matches a completion against `labels`.
///
/// The whole trimmed completion or its first whitespace-delimited token must
/// equal a label after case folding and stripping surrounding punctuation.
/// Labels are tried in order.
pub fn match_label(raw: &str, labels: &[impl AsRef<str>]) -> Option<String> {
    let whole = normalize_label(raw);
    let first = raw
        .split_whitespace()
        .next()
        .map(normalize_label)
        .unwrap_or_default();
    labels
        .iter()
        .find(|l| {
            let l = normalize_label(l.as_ref());
            !l.is_empty() && (l == whole || l == first)
        })
        .map(|l| l.as_ref().to_string())
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    slots: Slots,
    log: CallLog,
    replay: HashMap<String, CallResponse>,
    embed_dim: Mutex<Option<usize>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, max_parallel: usize, retry: RetryPolicy) -> Self {
        Gateway {
            backend,
            retry,
            slots: Slots::new(max_parallel),
            log: CallLog::in_memory(),
            replay: HashMap::new(),
            embed_dim: Mutex::new(None),
        }
    }

    /// Gateway over an OpenAI-compatible HTTP endpoint.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend = HttpBackend::new(config)?;
        Ok(Gateway::new(
            Arc::new(backend),
            config.max_parallel,
            config.retry_policy(),
        ))
    }

    /// Gateway over a mock backend with no backoff delay.
    pub fn mock(backend: MockBackend) -> Self {
        Gateway::new(
            Arc::new(backend),
            4,
            RetryPolicy {
                max_attempts: 1,
                base_backoff: Duration::ZERO,
            },
        )
    }

    pub fn with_call_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    /// Serves calls whose key appears in `records` from the recorded response.
    pub fn with_replay(mut self, records: impl IntoIterator<Item = CallRecord>) -> Self {
        for r in records {
            if let (Some(resp), None) = (r.response, r.error) {
                self.replay.insert(r.key, resp);
            }
        }
        self
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }

    fn call_key(&self, kind: CallKind, prompt: &str, params: Option<&DecodingParams>) -> String {
        let descriptor = serde_json::json!({
            "kind": kind,
            "model": self.backend.model_name(),
            "params": params,
            "prompt": prompt,
        });
        sha256_hex(descriptor.to_string())
    }

    fn with_retries<T>(
        &self,
        mut attempt_once: impl FnMut() -> Result<T, GatewayError>,
    ) -> (Result<T, GatewayError>, u32) {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let result = {
                let _slot = self.slots.acquire();
                attempt_once()
            };
            match result {
                Ok(v) => return (Ok(v), attempts),
                Err(e) if e.is_retryable() && attempts < self.retry.max_attempts => {
                    log::debug!("attempt {attempts} failed ({e}); retrying");
                    std::thread::sleep(self.retry.backoff(attempts));
                }
                Err(GatewayError::Transport { message, .. }) => {
                    return (Err(GatewayError::Transport { attempts, message }), attempts)
                }
                Err(e) => return (Err(e), attempts),
            }
        }
    }

    /// Requests a chat completion for `prompt`.
    pub fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<String, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        params.validate()?;
        let key = self.call_key(CallKind::Chat, prompt, Some(params));
        if let Some(CallResponse::Text(t)) = self.replay.get(&key) {
            return Ok(t.clone());
        }
        let started = Instant::now();
        let (result, attempts) = self.with_retries(|| self.backend.chat(prompt, params));
        self.log.push(CallRecord {
            key,
            prompt_hash: sha256_hex(prompt),
            kind: CallKind::Chat,
            model: self.backend.model_name().to_string(),
            attempts,
            latency_ms: started.elapsed().as_millis() as u64,
            usage: result.as_ref().ok().and_then(|r| r.usage),
            response: result
                .as_ref()
                .ok()
                .map(|r| CallResponse::Text(r.text.clone())),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        result.map(|r| r.text)
    }

    /// Embeds `text`. Every vector in one gateway's lifetime has the same
    /// dimension.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("text is empty".into()));
        }
        let key = self.call_key(CallKind::Embed, text, None);
        let vector = if let Some(CallResponse::Embedding(v)) = self.replay.get(&key) {
            v.clone()
        } else {
            let started = Instant::now();
            let (result, attempts) = self.with_retries(|| self.backend.embed(text));
            self.log.push(CallRecord {
                key,
                prompt_hash: sha256_hex(text),
                kind: CallKind::Embed,
                model: self.backend.model_name().to_string(),
                attempts,
                latency_ms: started.elapsed().as_millis() as u64,
                usage: None,
                response: result
                    .as_ref()
                    .ok()
                    .map(|v| CallResponse::Embedding(v.clone())),
                error: result.as_ref().err().map(|e| e.to_string()),
            });
            result?
        };
        let mut dim = self.embed_dim.lock();
        match *dim {
            Some(expected) if expected != vector.len() => Err(GatewayError::DimensionMismatch {
                expected,
                got: vector.len(),
            }),
            _ => {
                *dim = Some(vector.len());
                Ok(vector)
            }
        }
    }

    /// Completes `prompt` and maps the reply onto one of `labels`.
    pub fn classify(
        &self,
        prompt: &str,
        labels: &[&str],
        params: &DecodingParams,
    ) -> Result<Classification, GatewayError> {
        if labels.is_empty() {
            return Err(GatewayError::InvalidRequest("no labels given".into()));
        }
        let raw = self.complete(prompt, params)?;
        match match_label(&raw, labels) {
            Some(label) => Ok(Classification { label, raw }),
            None => Err(GatewayError::UnrecognizedLabel {
                raw,
                labels: labels.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }
}
