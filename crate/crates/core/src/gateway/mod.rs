//! Uniform access to OpenAI-compatible model endpoints.
//!
//! A [`Gateway`] wraps one [`Backend`] (HTTP or the scriptable mock) with the
//! endpoint's decoding policy, a global in-flight bound, retries and the
//! content-addressed response cache. It is the only place that talks to a
//! model.

mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{request_digest, unix_now, CacheEntry, ResponseCache};

pub use http::HttpBackend;
pub use mock::{MockBackend, MockRule, MockSpec, ScoreRule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before retry `i` (1-based) is `backoff_ms[min(i, len) - 1]`.
    #[serde(default)]
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: vec![500, 2000, 8000],
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        match self.backoff_ms.len() {
            0 => Duration::ZERO,
            n => Duration::from_millis(self.backoff_ms[(retry as usize).clamp(1, n) - 1]),
        }
    }
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_in_flight() -> usize {
    4
}

fn default_auth_env() -> String {
    "OPENAI_API_KEY".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub want_logprobs: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_auth_env")]
    pub auth_token_env: String,
    /// Minimum spacing between request starts, for rate-limited endpoints.
    #[serde(default)]
    pub min_interval_ms: Option<u64>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            want_logprobs: false,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            auth_token_env: default_auth_env(),
            min_interval_ms: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature != 0.0 {
            return Err(Error::Config(format!(
                "endpoint {}: decoding temperature must be 0, got {}",
                self.model_name, self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!(
                "endpoint {}: max_in_flight must be at least 1",
                self.model_name
            )));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config(format!(
                "endpoint {}: retry.max_attempts must be at least 1",
                self.model_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The chat-completions request body, as sent on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
}

impl ChatRequest {
    pub fn user_prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Echo-scoring request: log-probabilities of `response` given `prompt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub endpoint_fingerprint: String,
}

impl Completion {
    pub fn validate(&self) -> Result<()> {
        if let Some(lps) = &self.token_logprobs {
            if let Some(bad) = lps.iter().find(|t| !(t.logprob <= 0.0)) {
                return Err(Error::Validation(format!(
                    "token `{}` has logprob {} > 0",
                    bad.token, bad.logprob
                )));
            }
            if self.usage.completion_tokens != lps.len() as u64 {
                return Err(Error::Validation(format!(
                    "usage reports {} completion tokens but {} logprobs were returned",
                    self.usage.completion_tokens,
                    lps.len()
                )));
            }
        }
        Ok(())
    }
}

/// A model server reachable by the gateway.
pub trait Backend: Send + Sync {
    /// Identifies the server and model; part of every cache key.
    fn fingerprint(&self, config: &EndpointConfig) -> String;

    fn chat(&self, config: &EndpointConfig, request: &ChatRequest) -> Result<Completion>;

    /// Log-probabilities of the response tokens only.
    fn score(&self, config: &EndpointConfig, request: &ScoreRequest) -> Result<Vec<TokenLogprob>>;

    /// The serving tokenizer's count, when the server exposes one.
    fn tokenize(&self, _config: &EndpointConfig, _text: &str) -> Result<Option<u64>> {
        Ok(None)
    }
}

/// A token count together with how it was obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub count: u64,
    pub method: String,
}

pub const WHITESPACE_TOKENIZER: &str = "whitespace";

pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// exp of the mean negative log-likelihood.
pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Validation("perplexity of zero tokens is undefined".into()));
    }
    if let Some(bad) = logprobs.iter().find(|l| !l.is_finite() || **l > 0.0) {
        return Err(Error::Validation(format!("invalid token logprob {bad}")));
    }
    let nll: f64 = -logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(nll.exp())
}

#[derive(Debug)]
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
    min_interval: Option<Duration>,
    next_start: Mutex<Instant>,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        if let Some(gap) = self.min_interval {
            let wait = {
                let mut next = self.next_start.lock().unwrap();
                let now = Instant::now();
                let start = (*next).max(now);
                *next = start + gap;
                start - now
            };
            std::thread::sleep(wait);
        }
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    /// Requests handed to the backend, including retries.
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub peak_in_flight: u64,
}

/// Shareable across threads; clones share the limiter, cache and counters.
#[derive(Clone)]
pub struct Gateway {
    config: EndpointConfig,
    backend: Arc<dyn Backend>,
    cache: Option<Arc<ResponseCache>>,
    limiter: Arc<Limiter>,
    backend_calls: Arc<AtomicU64>,
    cache_hits: Arc<AtomicU64>,
    current: Arc<AtomicU64>,
    peak: Arc<AtomicU64>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.config.model_name)
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl Gateway {
    pub fn new(config: EndpointConfig, backend: Arc<dyn Backend>) -> Result<Gateway> {
        config.validate()?;
        let limiter = Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: config.max_in_flight,
            min_interval: config.min_interval_ms.map(Duration::from_millis),
            next_start: Mutex::new(Instant::now()),
        };
        Ok(Gateway {
            config,
            backend,
            cache: None,
            limiter: Arc::new(limiter),
            backend_calls: Arc::default(),
            cache_hits: Arc::default(),
            current: Arc::default(),
            peak: Arc::default(),
        })
    }

    /// An HTTP gateway for an OpenAI-compatible server.
    pub fn http(config: EndpointConfig) -> Result<Gateway> {
        let backend = HttpBackend::new(&config);
        Gateway::new(config, Arc::new(backend))
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Gateway {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_name
    }

    pub fn fingerprint(&self) -> String {
        self.backend.fingerprint(&self.config)
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            peak_in_flight: self.peak.load(Ordering::SeqCst),
        }
    }

    pub fn chat_request(&self, prompt: &str) -> ChatRequest {
        ChatRequest {
            model: self.config.model_name.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            logprobs: self.config.want_logprobs,
        }
    }

    /// Temperature-0 completion of a single user prompt.
    pub fn complete(&self, prompt: &str) -> Result<Completion> {
        self.config.validate()?;
        let request = self.chat_request(prompt);
        let body = serde_json::to_string(&serde_json::json!({ "chat": &request }))?;
        let completion: Completion = self.cached(&body, || {
            self.with_retries(|| self.backend.chat(&self.config, &request))
        })?;
        completion.validate()?;
        Ok(completion)
    }

    /// Per-token perplexity of `response` conditioned on `prompt`, over the
    /// response tokens only.
    pub fn score_perplexity(&self, prompt: &str, response: &str) -> Result<f64> {
        if !self.config.want_logprobs {
            return Err(Error::Capability(format!(
                "endpoint {} is not configured for logprobs",
                self.config.model_name
            )));
        }
        if response.is_empty() {
            return Err(Error::Validation("cannot score an empty response".into()));
        }
        let request = ScoreRequest {
            model: self.config.model_name.clone(),
            prompt: prompt.to_string(),
            response: response.to_string(),
        };
        let body = serde_json::to_string(&serde_json::json!({ "score": &request }))?;
        let logprobs: Vec<TokenLogprob> = self.cached(&body, || {
            self.with_retries(|| self.backend.score(&self.config, &request))
        })?;
        let values: Vec<f64> = logprobs.iter().map(|t| t.logprob).collect();
        perplexity_from_logprobs(&values)
    }

    /// Serving tokenizer count when available, else whitespace tokens.
    pub fn count_tokens(&self, text: &str) -> TokenCount {
        if text.is_empty() {
            return TokenCount {
                count: 0,
                method: WHITESPACE_TOKENIZER.into(),
            };
        }
        match self.backend.tokenize(&self.config, text) {
            Ok(Some(n)) => TokenCount {
                count: n,
                method: format!("tokenizer:{}", self.config.model_name),
            },
            Ok(None) => TokenCount {
                count: whitespace_tokens(text),
                method: WHITESPACE_TOKENIZER.into(),
            },
            Err(e) => {
                log::warn!(
                    "tokenize failed on {}: {e}; using whitespace",
                    self.config.model_name
                );
                TokenCount {
                    count: whitespace_tokens(text),
                    method: WHITESPACE_TOKENIZER.into(),
                }
            }
        }
    }

    /// Length of a generated completion: the server's usage report when
    /// present, otherwise whitespace tokens.
    pub fn completion_tokens(&self, completion: &Completion) -> TokenCount {
        if completion.usage.completion_tokens > 0 {
            TokenCount {
                count: completion.usage.completion_tokens,
                method: format!("usage:{}", self.config.model_name),
            }
        } else {
            TokenCount {
                count: whitespace_tokens(&completion.text),
                method: WHITESPACE_TOKENIZER.into(),
            }
        }
    }

    fn cached<T, F>(&self, body: &str, fetch: F) -> Result<T>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let fingerprint = self.fingerprint();
        let digest = request_digest(&fingerprint, body);
        if let Some(cache) = &self.cache {
            match cache.get(&digest) {
                Ok(Some(entry)) => match serde_json::from_value(entry.response) {
                    Ok(v) => {
                        self.cache_hits.fetch_add(1, Ordering::SeqCst);
                        return Ok(v);
                    }
                    Err(e) => log::warn!("cache entry {digest} has wrong shape ({e}); refetching"),
                },
                Ok(None) => {}
                Err(e) => log::warn!("{e}; treating as miss"),
            }
        }
        let value = fetch()?;
        if let Some(cache) = &self.cache {
            let entry = CacheEntry {
                request_digest: digest,
                response: serde_json::to_value(&value)?,
                created_at: unix_now(),
                endpoint_fingerprint: fingerprint,
            };
            if let Err(e) = cache.put(&entry) {
                log::warn!("could not write cache entry: {e}");
            }
        }
        Ok(value)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                let r = call();
                self.current.fetch_sub(1, Ordering::SeqCst);
                r
            };
            match result {
                Err(e) if e.is_transient() && attempt < policy.max_attempts => {
                    log::debug!("attempt {attempt} on {} failed: {e}", self.config.model_name);
                    std::thread::sleep(policy.delay_before_retry(attempt));
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                other => return other,
            }
        }
    }
}
