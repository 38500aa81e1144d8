use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use eci_cot::gateway::{perplexity_from_logprobs, EndpointConfig, Gateway, RetryPolicy};
use eci_cot::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// One-shot HTTP server answering from a fixed script, one reply per connection.
struct FakeServer {
    base: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl FakeServer {
    fn start(script: Vec<(u16, Value)>) -> FakeServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (status, reply) in script {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream);
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
                let mut len = 0;
                let mut auth = None;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    let (k, v) = h.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => auth = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen {
                    path,
                    auth,
                    body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                });
                let payload = reply.to_string();
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
            }
        });
        FakeServer { base, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn chat_reply(text: &str) -> Value {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 7, "completion_tokens": 3}
    })
}

fn config(base: &str, env: &str) -> EndpointConfig {
    let mut c = EndpointConfig::new(base, "served-model");
    c.retry = RetryPolicy {
        max_attempts: 3,
        backoff_ms: vec![1, 1, 1],
    };
    c.auth_token_env = env.to_string();
    c
}

#[test]
fn chat_request_shape_and_auth() {
    std::env::set_var("ECI_TEST_TOKEN_A", "sekrit");
    let server = FakeServer::start(vec![(200, chat_reply("Because. [Final Answer: No]"))]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_A")).unwrap();
    let c = gw.complete("Is it causal?").unwrap();
    assert_eq!(c.text, "Because. [Final Answer: No]");
    assert_eq!(c.usage.completion_tokens, 3);
    assert_eq!(gw.completion_tokens(&c).method, "usage:served-model");

    let seen = server.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekrit"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "served-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Is it causal?");
}

#[test]
fn no_token_no_header() {
    let server = FakeServer::start(vec![(200, chat_reply("x"))]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_UNSET")).unwrap();
    gw.complete("p").unwrap();
    assert_eq!(server.seen()[0].auth, None);
}

#[test]
fn rate_limit_is_retried_once() {
    let server = FakeServer::start(vec![
        (429, json!({"error": "slow down"})),
        (200, chat_reply("ok [Final Answer: Yes]")),
    ]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_UNSET")).unwrap();
    let c = gw.complete("p").unwrap();
    assert_eq!(c.text, "ok [Final Answer: Yes]");
    assert_eq!(server.seen().len(), 2);
}

#[test]
fn persistent_server_error_surfaces_after_budget() {
    let server = FakeServer::start(vec![(500, json!({})); 3]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_UNSET")).unwrap();
    match gw.complete("p") {
        Err(Error::Api { status, .. }) => assert_eq!(status, 500),
        other => panic!("expected api error, got {other:?}"),
    }
    assert_eq!(server.seen().len(), 3);
}

#[test]
fn client_error_is_not_retried() {
    let server = FakeServer::start(vec![(400, json!({"error": "bad"})), (200, chat_reply("x"))]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_UNSET")).unwrap();
    assert!(matches!(gw.complete("p"), Err(Error::Api { status: 400, .. })));
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn echo_scoring_keeps_response_tokens() {
    let prompt = "Q: why?\n";
    let lps = [-0.3, -1.1, -0.05];
    let server = FakeServer::start(vec![(
        200,
        json!({"choices": [{"text": "", "logprobs": {
            "tokens": ["Q", ":", " why", "?\n", "It", " rained", "."],
            "token_logprobs": [null, -2.0, -3.0, -0.5, lps[0], lps[1], lps[2]],
            "text_offset": [0, 1, 2, 6, 8, 10, 17]
        }}]}),
    )]);
    let mut cfg = config(&server.base, "ECI_TEST_TOKEN_UNSET");
    cfg.want_logprobs = true;
    let gw = Gateway::http(cfg).unwrap();
    let ppl = gw.score_perplexity(prompt, "It rained.").unwrap();
    let oracle = (-(lps.iter().sum::<f64>()) / 3.0).exp();
    assert!((ppl - oracle).abs() < 1e-12);
    assert!((ppl - perplexity_from_logprobs(&lps).unwrap()).abs() < 1e-12);

    let seen = server.seen();
    assert_eq!(seen[0].path, "/v1/completions");
    assert_eq!(seen[0].body["echo"], true);
    assert_eq!(seen[0].body["max_tokens"], 0);
    assert_eq!(seen[0].body["prompt"], "Q: why?\nIt rained.");
}

#[test]
fn scoring_without_logprobs_is_a_capability_error() {
    let gw = Gateway::http(config("http://127.0.0.1:9/v1", "ECI_TEST_TOKEN_UNSET")).unwrap();
    assert!(matches!(gw.score_perplexity("p", "r"), Err(Error::Capability(_))));
}

#[test]
fn refused_connection_is_transport() {
    let mut cfg = config("http://127.0.0.1:9/v1", "ECI_TEST_TOKEN_UNSET");
    cfg.retry.max_attempts = 2;
    let gw = Gateway::http(cfg).unwrap();
    match gw.complete("p") {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn tokenize_falls_back_when_unsupported() {
    let server = FakeServer::start(vec![
        (200, json!({"count": 5, "tokens": [1, 2, 3, 4, 5]})),
        (404, json!({})),
    ]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_UNSET")).unwrap();
    let t = gw.count_tokens("one two");
    assert_eq!(t.count, 5);
    assert_eq!(server.seen()[0].path, "/tokenize");

    let server = FakeServer::start(vec![(404, json!({}))]);
    let gw = Gateway::http(config(&server.base, "ECI_TEST_TOKEN_UNSET")).unwrap();
    let t = gw.count_tokens("one two three");
    assert_eq!(t.count, 3);
    assert_eq!(t.method, "whitespace");
}
