//! Remote backend against an in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use lithe_core::llm::{BackendKind, LlmConfig, LlmError, LlmGateway};
use serde_json::{json, Value};

struct Mock {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
}

/// Serves the given (status, body) pairs in order, one per connection.
fn serve(responses: Vec<(u16, Value)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.lock()
                .unwrap()
                .push(serde_json::from_slice(&buf).unwrap());
            let payload = body.to_string();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    Mock { url, requests }
}

fn gateway(url: &str) -> LlmGateway {
    LlmGateway::from_config(LlmConfig {
        backend: BackendKind::Remote,
        base_url: url.to_string(),
        initial_backoff_ms: 1,
        max_retries: 2,
        model_id: "test-model".into(),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn completion_retries_after_rate_limit() {
    let mock = serve(vec![
        (429, json!({"error": "slow down"})),
        (
            200,
            json!({"choices": [{"message": {"content": "SELECT 1;"}}],
                   "usage": {"prompt_tokens": 7, "completion_tokens": 3}}),
        ),
    ]);
    let s = gateway(&mock.url).session();
    assert_eq!(s.complete("rewrite SELECT 1").unwrap(), "SELECT 1;");
    assert_eq!(s.usage().prompt_tokens, 7);
    assert_eq!(s.usage().completion_tokens, 3);
    let reqs = mock.requests.lock().unwrap();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[1]["temperature"], json!(0));
    assert_eq!(reqs[1]["model"], json!("test-model"));
}

#[test]
fn persistent_rate_limit_gives_up() {
    let mock = serve(vec![(429, json!({})), (429, json!({})), (429, json!({}))]);
    let s = gateway(&mock.url).session();
    assert_eq!(s.complete("x"), Err(LlmError::RateLimited(2)));
}

#[test]
fn next_tokens_from_logprobs() {
    let mock = serve(vec![(
        200,
        json!({"choices": [{"message": {"content": "SE"},
               "logprobs": {"content": [{"token": "SE", "logprob": -0.1,
                  "top_logprobs": [{"token": "WITH", "logprob": -3.0},
                                   {"token": "SE", "logprob": -0.1},
                                   {"token": "(", "logprob": -4.0}]}]}}]}),
    )]);
    let s = gateway(&mock.url).session();
    let d = s.next_tokens("rewrite q", "SELECT a", 2).unwrap();
    assert_eq!(d.tokens, vec!["SE", "WITH"]);
    assert!((d.probs[0] - (-0.1f64).exp()).abs() < 1e-12);
    assert!(d.is_well_formed(2));
    let reqs = mock.requests.lock().unwrap();
    assert_eq!(reqs[0]["max_tokens"], json!(1));
    assert_eq!(reqs[0]["top_logprobs"], json!(2));
    assert_eq!(reqs[0]["messages"][1]["role"], json!("assistant"));
    assert_eq!(reqs[0]["messages"][1]["content"], json!("SELECT a"));
}

#[test]
fn missing_logprobs_is_unsupported() {
    let mock = serve(vec![(
        200,
        json!({"choices": [{"message": {"content": "x"}}]}),
    )]);
    let s = gateway(&mock.url).session();
    assert!(matches!(
        s.next_tokens("q", "", 2),
        Err(LlmError::UnsupportedByBackend(_))
    ));
}

#[test]
fn k_above_limit_rejected_without_request() {
    let s = gateway("http://127.0.0.1:9").session();
    assert!(matches!(
        s.next_tokens("q", "", 99),
        Err(LlmError::InvalidRequest(_))
    ));
}

#[test]
#[ignore = "needs LLM_API_KEY and network access"]
fn live_echo_smoke_test() {
    let s = LlmGateway::from_config(LlmConfig {
        backend: BackendKind::Remote,
        ..Default::default()
    })
    .unwrap()
    .session();
    assert!(!s.complete("Reply with the word ok.").unwrap().is_empty());
}
