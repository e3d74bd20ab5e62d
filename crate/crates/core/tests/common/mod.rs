#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

use r2a_core::answer::{mock_embed, mock_frame_key, mock_score};
use r2a_core::corpus::{CorpusIndex, EmbeddingMatrix, TextCorpus};
use r2a_core::rng::SplitMix64;

/// `n x d` matrix of uniform [-1, 1) values, not normalized.
pub fn random_rows(rng: &mut SplitMix64, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect())
        .collect()
}

pub fn random_index(seed: u64, n: usize, d: usize) -> CorpusIndex {
    let mut rng = SplitMix64::new(seed);
    let rows = random_rows(&mut rng, n, d);
    let corpus = TextCorpus::from_texts((0..n).map(|i| format!("caption number {i}"))).unwrap();
    CorpusIndex::new(corpus, EmbeddingMatrix::from_rows(&rows, false).unwrap()).unwrap()
}

/// Cosine similarity evaluated directly in f64.
pub fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute force: score every row, fully sort by (score desc, id asc), cut at k.
pub fn oracle_topk(index: &CorpusIndex, query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, cosine_f64(index.embeddings().row(i), query)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Minimal stand-in for the encoder adapter in mock mode, serving the five
/// wire endpoints from the library mocks. The first `fail_first` requests
/// are answered with HTTP 503.
pub struct MockAdapter {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl MockAdapter {
    pub fn start(dim: usize, fail_first: usize) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let port = server.server_addr().to_ip().unwrap().port();
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, count) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let n = count.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let (status, payload) = if n < fail_first {
                    (503, json!({"error": "warming up"}))
                } else {
                    route(req.url(), &body, dim)
                };
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                let resp = tiny_http::Response::from_string(payload.to_string())
                    .with_status_code(status)
                    .with_header(header);
                let _ = req.respond(resp);
            }
        });
        Self {
            url: format!("http://127.0.0.1:{port}"),
            requests,
            server,
            handle: Some(handle),
        }
    }
}

impl Drop for MockAdapter {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn route(url: &str, body: &str, dim: usize) -> (u16, Value) {
    let req: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    match url {
        "/health" => (200, json!({"status": "ok", "backend": "mock"})),
        "/v1/embed_text" => {
            let texts: Vec<String> = serde_json::from_value(req["texts"].clone()).unwrap_or_default();
            let rows: Vec<Vec<f32>> = texts.iter().map(|t| mock_embed(t, dim)).collect();
            (200, json!({"dim": dim, "embeddings": rows}))
        }
        "/v1/embed_frames" => {
            let vid = req["video_id"].as_str().unwrap_or_default();
            let l = req["num_frames"].as_u64().unwrap_or(0) as usize;
            let rows: Vec<Vec<f32>> = (0..l).map(|t| mock_embed(&mock_frame_key(vid, t), dim)).collect();
            (200, json!({"dim": dim, "embeddings": rows}))
        }
        "/v1/score" => {
            let prompt = req["prompt"].as_str().unwrap_or_default();
            let cands: Vec<String> = serde_json::from_value(req["candidates"].clone()).unwrap_or_default();
            let m = req["mask_count"].as_u64().unwrap_or(1) as f64;
            let lps: Vec<f64> = mock_score(prompt, &cands).into_iter().map(|lp| lp * m).collect();
            (200, json!({"log_probs": lps}))
        }
        "/v1/count_tokens" => {
            let text = req["text"].as_str().unwrap_or_default();
            (200, json!({"count": text.split_whitespace().count()}))
        }
        _ => (404, json!({"error": format!("no route {url}")})),
    }
}
