use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use skillmem::embedding::{Embedder, RemoteEmbedder, RemoteEmbedderConfig};
use skillmem::executor::{ChatMessage, CompletionParams, HttpChatBackend, HttpChatConfig, LlmBackend};
use skillmem::Error;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves `responses` in order, one per connection, and records requests.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}"), seen, handle)
}

#[test]
fn chat_retries_then_succeeds_with_bearer_token() {
    std::env::set_var("SKILLMEM_TEST_CHAT_KEY", "sekret");
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"ACTION: NOOP"}}]}"#;
    let (base, seen, h) = serve(vec![(500, "{}".into()), (200, ok.into())]);
    let backend = HttpChatBackend::new(HttpChatConfig {
        url: format!("{base}/v1/chat/completions"),
        model: "m1".into(),
        api_key_env: Some("SKILLMEM_TEST_CHAT_KEY".into()),
        max_attempts: 3,
        timeout_secs: 5,
        backoff_ms: 1,
    })
    .unwrap();
    let params = CompletionParams { temperature: 0.0, max_tokens: 64 };
    let out = backend.complete(&[ChatMessage::user("hello")], &params).unwrap();
    assert_eq!(out, "ACTION: NOOP");
    h.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].path, "/v1/chat/completions");
    assert_eq!(seen[1].auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(seen[1].body["model"], "m1");
    assert_eq!(seen[1].body["max_tokens"], 64);
    assert_eq!(seen[1].body["messages"][0]["content"], "hello");
}

#[test]
fn chat_gives_up_after_max_attempts() {
    let (base, seen, h) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
    let backend = HttpChatBackend::new(HttpChatConfig {
        url: base,
        api_key_env: None,
        max_attempts: 2,
        timeout_secs: 5,
        backoff_ms: 1,
        ..HttpChatConfig::default()
    })
    .unwrap();
    let err = backend
        .complete(&[ChatMessage::user("x")], &CompletionParams::default())
        .unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 2, .. }), "{err}");
    h.join().unwrap();
    assert!(seen.lock().unwrap().iter().all(|s| s.auth.is_none()));
}

#[test]
fn remote_embedder_reorders_and_normalizes() {
    let body = r#"{"data":[{"index":1,"embedding":[0.0,2.0]},{"index":0,"embedding":[3.0,4.0]}]}"#;
    let (base, seen, h) = serve(vec![(200, body.into())]);
    let emb = RemoteEmbedder::new(RemoteEmbedderConfig {
        url: format!("{base}/v1/embeddings"),
        api_key_env: None,
        max_attempts: 1,
        timeout_secs: 5,
        ..RemoteEmbedderConfig::default()
    })
    .unwrap();
    let vs = emb.embed_batch(&["first", "second"]).unwrap();
    assert_eq!(vs[0].as_slice(), &[0.6, 0.8]);
    assert_eq!(vs[1].as_slice(), &[0.0, 1.0]);
    assert_eq!(emb.dim(), 2);
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap()[0].body["input"], serde_json::json!(["first", "second"]));
}

#[test]
fn remote_embedder_rejects_short_response() {
    let (base, _, h) = serve(vec![(200, r#"{"data":[{"index":0,"embedding":[1.0]}]}"#.into())]);
    let emb = RemoteEmbedder::new(RemoteEmbedderConfig {
        url: base,
        api_key_env: None,
        max_attempts: 1,
        timeout_secs: 5,
        ..RemoteEmbedderConfig::default()
    })
    .unwrap();
    let err = emb.embed_batch(&["a", "b"]).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    h.join().unwrap();
}
