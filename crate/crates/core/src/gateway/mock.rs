//! A deterministic in-process backend for tests and offline runs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, Completion, EndpointConfig, ScoreRequest, TokenLogprob, Usage};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

type Responder = Arc<dyn Fn(&str) -> String + Send + Sync>;

/// Replies with `response` to any prompt containing every needle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains_all: Vec<String>,
    pub response: String,
}

/// File form of a mock endpoint, used by `mock = "path.json"` in run configs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Reply used when no rule matches. Without it the mock answers with a
    /// hash-derived Yes/No.
    #[serde(default)]
    pub default_response: Option<String>,
    /// Added to every scored token logprob (clamped at 0).
    #[serde(default)]
    pub logprob_shift: f64,
    /// Fixed per-token logprob for scored responses containing a substring.
    #[serde(default)]
    pub score_rules: Vec<ScoreRule>,
}

/// Scores every token of a matching response at `logprob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    pub response_contains: String,
    pub logprob: f64,
}

impl MockSpec {
    pub fn load(path: &Path) -> Result<MockSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::parse(
                path.display().to_string(),
                format!("line {}", e.line()),
                e.to_string(),
            )
        })
    }
}

pub struct MockBackend {
    model: String,
    salt: String,
    scripted: HashMap<String, String>,
    rules: Vec<MockRule>,
    default_response: Option<String>,
    fallback: Option<Responder>,
    scores: HashMap<String, Vec<f64>>,
    score_rules: Vec<ScoreRule>,
    logprob_shift: f64,
    failures: Mutex<(u32, u16)>,
    latency: Option<Duration>,
    calls: AtomicU64,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("model", &self.model).finish()
    }
}

fn hash_u64(parts: &[&str]) -> u64 {
    let h = sha256_hex(parts.join("\u{1f}").as_bytes());
    u64::from_str_radix(&h[..16], 16).unwrap()
}

fn score_key(prompt: &str, response: &str) -> String {
    sha256_hex(format!("{prompt}\u{1f}{response}").as_bytes())
}

impl MockBackend {
    pub fn new(model: impl Into<String>) -> MockBackend {
        MockBackend {
            model: model.into(),
            salt: String::new(),
            scripted: HashMap::new(),
            rules: Vec::new(),
            default_response: None,
            fallback: None,
            scores: HashMap::new(),
            score_rules: Vec::new(),
            logprob_shift: 0.0,
            failures: Mutex::new((0, 0)),
            latency: None,
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_spec(model: impl Into<String>, spec: &MockSpec) -> MockBackend {
        let mut mock = MockBackend::new(model);
        mock.rules = spec.rules.clone();
        mock.default_response = spec.default_response.clone();
        mock.logprob_shift = spec.logprob_shift;
        mock.score_rules = spec.score_rules.clone();
        mock.salt = sha256_hex(serde_json::to_string(spec).unwrap_or_default().as_bytes());
        mock
    }

    /// Exact reply for one prompt.
    pub fn script(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.scripted
            .insert(sha256_hex(prompt.as_bytes()), response.into());
        self
    }

    pub fn rule(mut self, contains_all: &[&str], response: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            contains_all: contains_all.iter().map(|s| s.to_string()).collect(),
            response: response.into(),
        });
        self
    }

    /// Reply computed from the prompt when nothing scripted matches.
    pub fn fallback(mut self, f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        self.fallback = Some(Arc::new(f));
        self
    }

    /// Exact token logprobs for scoring `response` after `prompt`.
    pub fn scores(mut self, prompt: &str, response: &str, logprobs: Vec<f64>) -> Self {
        self.scores.insert(score_key(prompt, response), logprobs);
        self
    }

    pub fn logprob_shift(mut self, shift: f64) -> Self {
        self.logprob_shift = shift;
        self
    }

    /// The next `n` calls fail: status 0 is a transport error, anything else
    /// an API error with that status.
    pub fn fail_next(self, n: u32, status: u16) -> Self {
        *self.failures.lock().unwrap() = (n, status);
        self
    }

    pub fn latency(mut self, d: Duration) -> Self {
        self.latency = Some(d);
        self
    }

    /// Distinguishes mocks whose closures differ, for cache keys.
    pub fn salt(mut self, salt: impl Into<String>) -> Self {
        self.salt = salt.into();
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn enter(&self) -> Result<()> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let mut f = self.failures.lock().unwrap();
        if f.0 > 0 {
            f.0 -= 1;
            return Err(match f.1 {
                0 => Error::Transport {
                    attempts: 1,
                    message: "injected connection failure".into(),
                },
                status => Error::Api {
                    status,
                    body: "injected failure".into(),
                },
            });
        }
        Ok(())
    }

    fn respond(&self, prompt: &str) -> String {
        if let Some(r) = self.scripted.get(&sha256_hex(prompt.as_bytes())) {
            return r.clone();
        }
        if let Some(rule) = self
            .rules
            .iter()
            .find(|r| r.contains_all.iter().all(|n| prompt.contains(n.as_str())))
        {
            return rule.response.clone();
        }
        if let Some(f) = &self.fallback {
            return f(prompt);
        }
        if let Some(d) = &self.default_response {
            return d.clone();
        }
        let h = hash_u64(&[&self.model, prompt]);
        let answer = if h % 2 == 0 { "Yes" } else { "No" };
        format!("Mock reasoning {:x}. [Final Answer: {answer}]", h >> 40)
    }

    fn token_logprob(&self, context: &str, token: &str) -> f64 {
        let h = hash_u64(&[&self.model, context, token]);
        let base = -0.05 - (h % 1000) as f64 / 1000.0 * 1.5;
        (base + self.logprob_shift).min(0.0)
    }
}

impl Backend for MockBackend {
    fn fingerprint(&self, config: &EndpointConfig) -> String {
        if self.salt.is_empty() {
            format!("mock:{}", config.model_name)
        } else {
            format!(
                "mock:{}:{}",
                config.model_name,
                &self.salt[..self.salt.len().min(16)]
            )
        }
    }

    fn chat(&self, config: &EndpointConfig, request: &ChatRequest) -> Result<Completion> {
        self.enter()?;
        let text = self.respond(request.user_prompt());
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let logprobs = request.logprobs.then(|| {
            tokens
                .iter()
                .map(|t| TokenLogprob {
                    token: t.to_string(),
                    logprob: self.token_logprob("", t),
                })
                .collect()
        });
        Ok(Completion {
            usage: Usage {
                prompt_tokens: request.user_prompt().split_whitespace().count() as u64,
                completion_tokens: tokens.len() as u64,
            },
            text,
            token_logprobs: logprobs,
            endpoint_fingerprint: self.fingerprint(config),
        })
    }

    fn score(&self, _config: &EndpointConfig, request: &ScoreRequest) -> Result<Vec<TokenLogprob>> {
        self.enter()?;
        if let Some(lps) = self.scores.get(&score_key(&request.prompt, &request.response)) {
            return Ok(lps
                .iter()
                .enumerate()
                .map(|(i, &logprob)| TokenLogprob {
                    token: format!("t{i}"),
                    logprob,
                })
                .collect());
        }
        let fixed = self
            .score_rules
            .iter()
            .find(|r| request.response.contains(&r.response_contains))
            .map(|r| r.logprob.min(0.0));
        Ok(request
            .response
            .split_whitespace()
            .map(|t| TokenLogprob {
                token: t.to_string(),
                logprob: fixed.unwrap_or_else(|| self.token_logprob("", t)),
            })
            .collect())
    }
}
