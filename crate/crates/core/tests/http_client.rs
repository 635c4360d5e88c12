use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use latent_audit::embed::{EmbedRequest, EmbeddingProvider, HttpConfig, HttpEmbedder};
use serde_json::{json, Value};

const DIM: usize = 768;

/// Minimal sidecar: `/health` reports the configured width and `/embed` answers
/// each text with a row holding its first token (parsed as a number) and
/// its number of masked tokens. The first `failures` requests get a 503.
struct MockSidecar {
    url: String,
    requests: Arc<AtomicUsize>,
}

impl MockSidecar {
    fn start(failures: usize, dim: usize) -> Self {
        Self::start_with(failures, dim, dim)
    }

    /// Reports `health_dim` at `/health` but embeds with `embed_dim`.
    fn start_with(failures: usize, health_dim: usize, embed_dim: usize) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let counter = counter.clone();
                std::thread::spawn(move || serve(stream, &counter, failures, [health_dim, embed_dim]));
            }
        });
        Self { url, requests }
    }
}

fn serve(stream: TcpStream, counter: &AtomicUsize, failures: usize, [health_dim, dim]: [usize; 2]) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut out = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();

        let n = counter.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = if n < failures {
            ("503 Service Unavailable", json!({"error": "warming up"}))
        } else if request_line.starts_with("GET /health") {
            ("200 OK", json!({"status": "ok", "dim": health_dim, "model": "mock"}))
        } else if request_line.starts_with("POST /embed") {
            let req: Value = serde_json::from_slice(&body).unwrap();
            let texts = req["texts"].as_array().unwrap();
            let masked = req["masked"].as_array().unwrap();
            let rows: Vec<Vec<f64>> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut row = vec![0.0; dim];
                    row[0] = t[0].as_str().unwrap().parse().unwrap();
                    row[1] = masked.iter().filter(|m| m[0].as_u64() == Some(i as u64)).count() as f64;
                    row
                })
                .collect();
            ("200 OK", json!({"dim": dim, "embeddings": rows}))
        } else {
            ("404 Not Found", json!({}))
        };
        let body = payload.to_string();
        let head = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            body.len()
        );
        if out.write_all(head.as_bytes()).and_then(|_| out.write_all(body.as_bytes())).is_err() {
            return;
        }
    }
}

fn fast(url: &str) -> HttpConfig {
    HttpConfig { retries: 2, retry_backoff: Duration::from_millis(5), timeout: Duration::from_secs(5), ..HttpConfig::new(url) }
}

fn numbered_texts(n: usize) -> Vec<Vec<String>> {
    (0..n).map(|i| vec![i.to_string(), "word".to_string()]).collect()
}

#[test]
fn health_reports_the_probe_input_width() {
    let mock = MockSidecar::start(0, DIM);
    let client = HttpEmbedder::new(fast(&mock.url)).unwrap();
    let health = client.health().unwrap();
    assert_eq!(health.dim, DIM);
    assert_eq!(client.session_dim(), Some(DIM));
}

#[test]
fn rows_come_back_in_request_order_across_chunks() {
    let mock = MockSidecar::start(0, DIM);
    let client = HttpEmbedder::new(HttpConfig { max_batch: 3, max_in_flight: 4, ..fast(&mock.url) }).unwrap();
    let m = client.embed(&EmbedRequest::new(numbered_texts(20))).unwrap();
    assert_eq!((m.nrows(), m.ncols()), (20, DIM));
    for i in 0..20 {
        assert_eq!(m.data()[(i, 0)], i as f64);
    }
}

#[test]
fn masks_are_rebased_per_chunk() {
    let mock = MockSidecar::start(0, DIM);
    let client = HttpEmbedder::new(HttpConfig { max_batch: 4, ..fast(&mock.url) }).unwrap();
    let req = EmbedRequest::new(numbered_texts(10)).with_masked(vec![(1, 1), (5, 0), (5, 1), (9, 1)]);
    let m = client.embed(&req).unwrap();
    let masked: Vec<f64> = (0..10).map(|i| m.data()[(i, 1)]).collect();
    assert_eq!(masked, vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn transient_failures_are_retried() {
    let mock = MockSidecar::start(2, DIM);
    let client = HttpEmbedder::new(fast(&mock.url)).unwrap();
    assert_eq!(client.health().unwrap().dim, DIM);
    assert_eq!(mock.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_sidecar_fails_after_retries() {
    let url = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", listener.local_addr().unwrap())
    };
    let client = HttpEmbedder::new(fast(&url)).unwrap();
    let err = client.embed(&EmbedRequest::new(numbered_texts(2))).unwrap_err();
    assert!(err.to_string().contains("after 3 attempts"), "{err}");
}

#[test]
fn dimension_change_within_a_session_is_rejected() {
    let mock = MockSidecar::start_with(0, DIM, 16);
    let client = HttpEmbedder::new(fast(&mock.url)).unwrap();
    client.health().unwrap();
    let err = client.embed(&EmbedRequest::new(numbered_texts(1))).unwrap_err();
    assert!(err.to_string().contains("differs from session dimension"), "{err}");
}
