use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{random_deletion, random_swap, AugmentError};
use crate::tensor::{fnv1a, FNV_OFFSET};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Rejected(String),
}

impl ServiceError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ServiceError::Timeout | ServiceError::Transport(_) => true,
            ServiceError::Status(code) => *code == 429 || *code >= 500,
            ServiceError::Malformed(_) | ServiceError::Rejected(_) => false,
        }
    }
}

/// A remote text-to-text service taking a JSON request and answering with
/// one string.
pub trait TextService: Send + Sync {
    fn call(&self, request: &Value) -> Result<String, ServiceError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: usize) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u64.checked_shl(attempt as u32).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Calls `service`, retrying retryable failures with exponential backoff.
    pub fn call(&self, service: &dyn TextService, request: &Value) -> Result<String, AugmentError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match service.call(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::debug!("attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(self.delay(attempt - 1));
                }
                Err(e) if e.is_retryable() => {
                    return Err(AugmentError::Exhausted { attempts: attempt, last: e })
                }
                Err(e) => return Err(AugmentError::Service(e)),
            }
        }
    }
}

/// JSON-over-HTTP client; the response body must be `{"text": ...}`.
pub struct HttpService {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

impl HttpService {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }

    /// Reads `<PREFIX>_ENDPOINT` and the optional `<PREFIX>_TOKEN`.
    pub fn from_env(prefix: &str, timeout: Duration) -> Option<Self> {
        let endpoint = std::env::var(format!("{prefix}_ENDPOINT")).ok()?;
        let token = std::env::var(format!("{prefix}_TOKEN")).ok();
        Some(Self::new(endpoint, token, timeout))
    }
}

impl TextService for HttpService {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(request).map_err(|e| match e {
            ureq::Error::Timeout(_) => ServiceError::Timeout,
            ureq::Error::StatusCode(code) => ServiceError::Status(code),
            other => ServiceError::Transport(other.to_string()),
        })?;
        let body: TextResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ServiceError::Malformed(e.to_string()))?;
        Ok(body.text)
    }
}

/// The sentence carried by a request: the `text` field of a translation
/// request, or the quoted sentence at the end of a paraphrase prompt.
pub fn extract_sentence(request: &Value) -> Result<String, ServiceError> {
    if let Some(text) = request.get("text").and_then(Value::as_str) {
        return Ok(text.to_string());
    }
    let prompt = request
        .get("prompt")
        .and_then(Value::as_str)
        .ok_or_else(|| ServiceError::Rejected("request has neither text nor prompt".into()))?;
    let tail = prompt
        .find("Respond with only the")
        .map_or(prompt, |i| &prompt[i..]);
    let start = tail
        .find(": \"")
        .ok_or_else(|| ServiceError::Rejected("prompt has no quoted sentence".into()))?;
    let quoted = &tail[start + 3..];
    Ok(quoted.strip_suffix('"').unwrap_or(quoted).to_string())
}

fn text_seed(s: &str) -> u64 {
    fnv1a(s.as_bytes(), FNV_OFFSET)
}

/// Returns the sentence unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityService;

impl TextService for IdentityService {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        extract_sentence(request)
    }
}

/// Looks up canned answers by sentence; unknown sentences are rejected.
#[derive(Debug, Default)]
pub struct ScriptedService {
    answers: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl ScriptedService {
    pub fn new<I, K, V>(answers: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            answers: answers.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextService for ScriptedService {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = extract_sentence(request)?;
        self.answers
            .get(&key)
            .cloned()
            .ok_or_else(|| ServiceError::Rejected(format!("no scripted answer for {key:?}")))
    }
}

/// Fails the first `failures` calls with `error`, then delegates.
pub struct FlakyService<S> {
    inner: S,
    failures: usize,
    error: ServiceError,
    calls: AtomicUsize,
}

impl<S: TextService> FlakyService<S> {
    pub fn new(inner: S, failures: usize, error: ServiceError) -> Self {
        Self {
            inner,
            failures,
            error,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: TextService> TextService for FlakyService<S> {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            Err(self.error.clone())
        } else {
            self.inner.call(request)
        }
    }
}

/// Offline translator: passes text through to the pivot language and swaps
/// the first two words on the way back.
#[derive(Debug, Clone)]
pub struct MockTranslator {
    pub source_language: String,
}

impl Default for MockTranslator {
    fn default() -> Self {
        Self {
            source_language: "en".into(),
        }
    }
}

impl TextService for MockTranslator {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        let text = extract_sentence(request)?;
        let target = request.get("target").and_then(Value::as_str).unwrap_or("");
        if target != self.source_language {
            return Ok(text);
        }
        let mut words: Vec<&str> = text.split_whitespace().collect();
        if words.len() >= 2 {
            words.swap(0, 1);
        }
        Ok(words.join(" "))
    }
}

/// Offline paraphraser: deterministic deletion and swap, seeded by the prompt.
#[derive(Debug, Clone, Copy)]
pub struct MockParaphraser {
    pub deletion_p: f64,
}

impl Default for MockParaphraser {
    fn default() -> Self {
        Self { deletion_p: 0.2 }
    }
}

impl TextService for MockParaphraser {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        let sentence = extract_sentence(request)?;
        let seed = text_seed(&request.to_string());
        let shortened = random_deletion(&sentence, self.deletion_p, seed);
        Ok(random_swap(&shortened, seed.rotate_left(17)))
    }
}

/// Offline paraphraser that knows which topic each word belongs to and
/// resamples words within their topic, keeping meaning at the topic level.
#[derive(Debug, Clone)]
pub struct TopicParaphraser {
    pools: Vec<Vec<String>>,
    topic_of: HashMap<String, usize>,
    rate: f64,
}

impl TopicParaphraser {
    pub fn new(pools: Vec<Vec<String>>, rate: f64) -> Self {
        let topic_of = pools
            .iter()
            .enumerate()
            .flat_map(|(t, pool)| pool.iter().map(move |w| (w.clone(), t)))
            .collect();
        Self {
            pools,
            topic_of,
            rate,
        }
    }
}

impl TextService for TopicParaphraser {
    fn call(&self, request: &Value) -> Result<String, ServiceError> {
        let sentence = extract_sentence(request)?;
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed(&request.to_string()));
        let words: Vec<String> = sentence
            .split_whitespace()
            .map(|w| {
                let resample = rng.random::<f64>() < self.rate;
                match self.topic_of.get(w) {
                    Some(&t) if resample => {
                        let pool = &self.pools[t];
                        pool[rng.random_range(0..pool.len())].clone()
                    }
                    _ => w.to_string(),
                }
            })
            .collect();
        Ok(words.join(" "))
    }
}
