#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use optiset_core::backend::{BackendError, DecodingParams, HttpBackend, HttpConfig, LlmBackend};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// Serves `handler` on an ephemeral port; one request per connection.
fn serve(handler: Box<Handler>) -> (String, Arc<Mutex<Vec<Request>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&log);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let req = Request {
                path,
                auth,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            };
            let n = {
                let mut l = seen.lock().unwrap();
                l.push(req.clone());
                l.len()
            };
            let (status, text) = handler(&req, n);
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), log)
}

fn backend(url: &str) -> HttpBackend {
    let mut cfg = HttpConfig::new(url, "tiny");
    cfg.api_key = Some("secret".into());
    cfg.backoff_ms = 1;
    cfg.timeout_secs = 5;
    HttpBackend::new(cfg)
}

#[test]
fn generate_reads_message_content() {
    let (url, log) = serve(Box::new(|_, _| {
        (
            200,
            json!({"choices": [{"message": {"content": "### Final Selection: [1]"}}]}).to_string(),
        )
    }));
    let out = backend(&url)
        .generate("pick", &DecodingParams::greedy().with_seed(4))
        .unwrap();
    assert_eq!(out, "### Final Selection: [1]");
    let req = &log.lock().unwrap()[0];
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.auth.as_deref(), Some("Bearer secret"));
    assert_eq!(req.body["model"], "tiny");
    assert_eq!(req.body["messages"][0]["content"], "pick");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["seed"], 4);
}

#[test]
fn scoring_skips_the_context_prefix() {
    let (url, log) = serve(Box::new(|_, _| {
        (
            200,
            json!({"choices": [{"logprobs": {
                "tokens": ["Q", "?", " Paris", " France"],
                "token_logprobs": [null, -1.5, -0.5, -1.0],
                "text_offset": [0, 1, 2, 8]
            }}]})
            .to_string(),
        )
    }));
    let scored = backend(&url)
        .score_continuation("Q?", " Paris France")
        .unwrap();
    assert_eq!(scored.tokens, vec![" Paris", " France"]);
    assert_eq!(scored.logprobs, vec![-0.5, -1.0]);
    let req = &log.lock().unwrap()[0];
    assert_eq!(req.path, "/v1/completions");
    assert_eq!(req.body["echo"], true);
    assert_eq!(req.body["prompt"], "Q? Paris France");
}

#[test]
fn scoring_without_offsets_uses_tokenize() {
    let (url, _) = serve(Box::new(|req, _| {
        if req.path.ends_with("tokenize") {
            (200, json!({"count": 2}).to_string())
        } else {
            (
                200,
                json!({
                    "choices": [{"logprobs": {
                        "tokens": ["Q", "?", " A", " gen"],
                        "token_logprobs": [null, -1.0, -0.25, -4.0]
                    }}],
                    "usage": {"prompt_tokens": 3}
                })
                .to_string(),
            )
        }
    }));
    let scored = backend(&url).score_continuation("Q?", " A").unwrap();
    assert_eq!(scored.logprobs, vec![-0.25]);
}

#[test]
fn server_error_is_reported_with_status() {
    let (url, log) = serve(Box::new(|_, _| (500, "boom".into())));
    let err = backend(&url)
        .generate("x", &DecodingParams::greedy())
        .unwrap_err();
    assert_eq!(
        err,
        BackendError::Status {
            status: 500,
            body: "boom".into()
        }
    );
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn transient_status_is_retried() {
    let (url, log) = serve(Box::new(|_, n| {
        if n < 3 {
            (503, "busy".into())
        } else {
            (
                200,
                json!({"choices": [{"message": {"content": "ok"}}]}).to_string(),
            )
        }
    }));
    let out = backend(&url)
        .generate("x", &DecodingParams::greedy())
        .unwrap();
    assert_eq!(out, "ok");
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn missing_logprobs_means_scoring_unsupported() {
    let (url, _) = serve(Box::new(|_, _| {
        (200, json!({"choices": [{"text": "x"}]}).to_string())
    }));
    let err = backend(&url).score_continuation("a", "b").unwrap_err();
    assert_eq!(err, BackendError::ScoringUnsupported);
}

#[test]
fn unreachable_server() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = HttpConfig::new(format!("http://{addr}"), "m");
    cfg.attempts = 1;
    let err = HttpBackend::new(cfg)
        .generate("x", &DecodingParams::greedy())
        .unwrap_err();
    assert!(matches!(err, BackendError::Unreachable(_)), "{err:?}");
}
