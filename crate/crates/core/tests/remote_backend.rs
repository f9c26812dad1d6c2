use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use demosel::llm::remote::{RemoteBackend, RemoteConfig};
use demosel::llm::{BackendError, Gateway, GenerationParams, LlmBackend, RetryPolicy, ScoreCache};

struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
    auth: Arc<Mutex<Vec<String>>>,
}

/// Minimal completions endpoint. Echo requests get one token per
/// whitespace-separated word: -0.5 for prompt words up to "Output:", -1.0
/// after. `fail_first` requests are answered with HTTP 503.
fn serve(fail_first: usize, status_override: Option<u16>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (h, a) = (hits.clone(), auth.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    a.lock().unwrap().push(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let n = h.fetch_add(1, Ordering::SeqCst);
            let req: Value = serde_json::from_slice(&body).unwrap();
            let (status, payload) = if n < fail_first {
                (503, json!({"error": "busy"}))
            } else if let Some(s) = status_override {
                (s, json!({"error": "bad request"}))
            } else if req["echo"] == json!(true) {
                let prompt = req["prompt"].as_str().unwrap();
                let cut = prompt.find("Output:").map(|i| i + "Output:".len()).unwrap_or(0);
                let (mut tokens, mut lps, mut offs) = (vec![], vec![], vec![]);
                let mut pos = 0;
                for (i, w) in prompt.split(' ').enumerate() {
                    let tok = if i == 0 { w.to_string() } else { format!(" {w}") };
                    offs.push(pos);
                    lps.push(if i == 0 { Value::Null } else if pos >= cut { json!(-1.0) } else { json!(-0.5) });
                    pos += tok.chars().count();
                    tokens.push(tok);
                }
                (200, json!({"choices": [{"text": prompt, "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offs}}]}))
            } else {
                (200, json!({"choices": [{"text": " person: John"}]}))
            };
            let text = payload.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    Server { url, hits, auth }
}

fn backend(url: &str) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        endpoint: url.into(),
        model: "test-model".into(),
        timeout_secs: 10,
        ..Default::default()
    })
    .unwrap()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        retries: 3,
        base_delay: std::time::Duration::from_millis(5),
    }
}

#[test]
fn scores_only_continuation_tokens() {
    let s = serve(0, None);
    let g = Gateway::new(Arc::new(backend(&s.url)));
    let v = g.avg_loglik("Task: NER Input: John Output:", " person: John").unwrap();
    assert!((v + 1.0).abs() < 1e-12, "{v}");
}

#[test]
fn generates_text() {
    let s = serve(0, None);
    let g = Gateway::new(Arc::new(backend(&s.url)));
    assert_eq!(g.generate("prompt", &GenerationParams::default()).unwrap(), " person: John");
}

#[test]
fn server_errors_are_retried() {
    let s = serve(2, None);
    let g = Gateway::new(Arc::new(backend(&s.url))).with_retry(fast_retry());
    assert!(g.generate("prompt", &GenerationParams::default()).is_ok());
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let s = serve(0, Some(400));
    let g = Gateway::new(Arc::new(backend(&s.url))).with_retry(fast_retry());
    let e = g.generate("prompt", &GenerationParams::default()).unwrap_err();
    assert!(matches!(e, BackendError::Protocol(_)), "{e}");
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let g = Gateway::new(Arc::new(backend(&format!("http://127.0.0.1:{port}/v1/completions")))).with_retry(fast_retry());
    assert!(matches!(g.generate("p", &GenerationParams::default()), Err(BackendError::Transport(_))));
}

#[test]
fn cache_answers_repeat_queries() {
    let s = serve(0, None);
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(ScoreCache::open(dir.path()).unwrap());
    let g = Gateway::new(Arc::new(backend(&s.url))).with_cache(cache);
    let a = g.avg_loglik("Input: x Output:", " None").unwrap();
    let b = g.avg_loglik("Input: x Output:", " None").unwrap();
    assert_eq!(a, b);
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);

    let reopened = Arc::new(ScoreCache::open(dir.path()).unwrap());
    let g = Gateway::new(Arc::new(backend(&s.url))).with_cache(reopened);
    assert_eq!(g.avg_loglik("Input: x Output:", " None").unwrap(), a);
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn api_key_comes_from_the_named_variable() {
    let s = serve(0, None);
    std::env::set_var("DEMOSEL_TEST_KEY", "sk-test");
    let b = RemoteBackend::new(RemoteConfig {
        endpoint: s.url.clone(),
        model: "m".into(),
        api_key_env: Some("DEMOSEL_TEST_KEY".into()),
        ..Default::default()
    })
    .unwrap();
    b.complete("p", &GenerationParams::default()).unwrap();
    assert_eq!(s.auth.lock().unwrap().as_slice(), ["Bearer sk-test"]);

    let missing = RemoteBackend::new(RemoteConfig {
        api_key_env: Some("DEMOSEL_TEST_KEY_UNSET".into()),
        ..Default::default()
    });
    assert!(missing.is_err());
}
