//! OpenAI-compatible HTTP backend.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, ChatRequest, Completion, EndpointConfig, ScoreRequest, TokenLogprob, Usage};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct HttpBackend {
    agent: ureq::Agent,
    token: Option<String>,
    tokenize_unsupported: AtomicBool,
}

impl HttpBackend {
    pub fn new(config: &EndpointConfig) -> HttpBackend {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .new_agent();
        let token = std::env::var(&config.auth_token_env)
            .ok()
            .filter(|t| !t.is_empty());
        HttpBackend {
            agent,
            token,
            tokenize_unsupported: AtomicBool::new(false),
        }
    }

    fn url(config: &EndpointConfig, path: &str) -> String {
        format!("{}/{}", config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("{url}: {e}"),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("{url}: reading body: {e}"),
        })?;
        if !(200..300).contains(&status) {
            return Err(Error::Api { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| Error::Api {
            status,
            body: format!("malformed JSON ({e}): {}", truncate(&text, 200)),
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn malformed(what: &str) -> Error {
    Error::Api {
        status: 200,
        body: format!("response missing {what}"),
    }
}

/// Extracts text, logprobs and usage from a chat-completions response.
pub(crate) fn parse_chat_response(
    v: &Value,
    want_logprobs: bool,
) -> Result<(String, Option<Vec<TokenLogprob>>, Usage)> {
    let choice = v.pointer("/choices/0").ok_or_else(|| malformed("choices[0]"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("message.content"))?
        .to_string();
    let logprobs = if want_logprobs {
        let items = choice
            .pointer("/logprobs/content")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Capability("endpoint returned no logprobs".into()))?;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let token = item
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("logprobs token"))?;
            let logprob = item
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed("logprob"))?;
            out.push(TokenLogprob {
                token: token.to_string(),
                logprob,
            });
        }
        Some(out)
    } else {
        None
    };
    let usage = Usage {
        prompt_tokens: v
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
        completion_tokens: v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok((text, logprobs, usage))
}

/// Response-token logprobs from an echo completion. `prompt_chars` is the
/// prompt length in characters; tokens starting at or after it belong to the
/// response.
pub(crate) fn parse_echo_response(v: &Value, prompt_chars: usize) -> Result<Vec<TokenLogprob>> {
    let lp = v
        .pointer("/choices/0/logprobs")
        .ok_or_else(|| Error::Capability("endpoint returned no logprobs for echo scoring".into()))?;
    let tokens = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.tokens"))?;
    let values = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.token_logprobs"))?;
    let offsets = lp
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.text_offset"))?;
    if tokens.len() != values.len() || tokens.len() != offsets.len() {
        return Err(malformed("aligned logprob arrays"));
    }
    let mut out = Vec::new();
    for ((t, l), o) in tokens.iter().zip(values).zip(offsets) {
        let offset = o.as_u64().ok_or_else(|| malformed("numeric text_offset"))? as usize;
        if offset < prompt_chars {
            continue;
        }
        let logprob = l.as_f64().ok_or_else(|| malformed("response token logprob"))?;
        out.push(TokenLogprob {
            token: t.as_str().unwrap_or_default().to_string(),
            logprob,
        });
    }
    Ok(out)
}

impl Backend for HttpBackend {
    fn fingerprint(&self, config: &EndpointConfig) -> String {
        format!("{}#{}", config.base_url.trim_end_matches('/'), config.model_name)
    }

    fn chat(&self, config: &EndpointConfig, request: &ChatRequest) -> Result<Completion> {
        let body = serde_json::to_value(request)?;
        let v = self.post(&Self::url(config, "chat/completions"), &body)?;
        let (text, token_logprobs, usage) = parse_chat_response(&v, request.logprobs)?;
        Ok(Completion {
            text,
            token_logprobs,
            usage,
            endpoint_fingerprint: self.fingerprint(config),
        })
    }

    fn score(&self, config: &EndpointConfig, request: &ScoreRequest) -> Result<Vec<TokenLogprob>> {
        let body = json!({
            "model": request.model,
            "prompt": format!("{}{}", request.prompt, request.response),
            "max_tokens": 0,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let v = self.post(&Self::url(config, "completions"), &body)?;
        parse_echo_response(&v, request.prompt.chars().count())
    }

    fn tokenize(&self, config: &EndpointConfig, text: &str) -> Result<Option<u64>> {
        if self.tokenize_unsupported.load(Ordering::Relaxed) {
            return Ok(None);
        }
        // vLLM serves /tokenize beside /v1 rather than under it.
        let root = config.base_url.trim_end_matches('/').trim_end_matches("/v1");
        let body = json!({ "model": config.model_name, "prompt": text, "add_special_tokens": false });
        match self.post(&format!("{root}/tokenize"), &body) {
            Ok(v) => Ok(v.get("count").and_then(Value::as_u64)),
            Err(Error::Api { status, .. }) if (400..500).contains(&status) => {
                self.tokenize_unsupported.store(true, Ordering::Relaxed);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}
