//! Masked-LM answer selection over a closed candidate vocabulary, plus the
//! backends that provide scores and embeddings.
//!
//! Real models live behind the encoder adapter's HTTP protocol
//! ([`HttpBackend`]). [`MockBackend`] and [`OverlapScorer`] are hermetic,
//! fully deterministic stand-ins.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::context::{whitespace_tokens, AnswerPrompt};
use crate::corpus::{l2_norm, normalize_rows, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::normalize_answer;
use crate::retrieval::FrameFeatures;
use crate::rng::{fnv1a64, SplitMix64};

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";
/// Embedding width used by [`mock_score`].
pub const MOCK_SCORE_DIM: usize = 64;

/// Scores candidate answers at the mask slots of a prompt.
pub trait Scorer: Send + Sync {
    /// Literal mask token the backend's tokenizer expects.
    fn mask_token(&self) -> &str;

    /// Total log-probability of each candidate filling the `mask_count`
    /// mask slots of `prompt`, one finite value per candidate.
    fn score(&self, prompt: &str, mask_count: usize, candidates: &[String]) -> Result<Vec<f64>>;

    fn count_tokens(&self, text: &str) -> Result<usize>;
}

/// Produces unit-normalized text and frame embeddings.
pub trait Embedder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix>;

    fn embed_frames(&self, video_id: &str, frames_path: &Path, num_frames: usize) -> Result<FrameFeatures>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    answers: Vec<String>,
}

impl CandidateSet {
    /// Rejects empty answers and answers that collide after normalization.
    pub fn new<S: Into<String>>(answers: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for a in answers {
            let a = a.into().trim().to_owned();
            if a.is_empty() {
                return Err(Error::arg("candidate answers must be non-empty"));
            }
            if !seen.insert(normalize_answer(&a)) {
                return Err(Error::arg(format!("duplicate candidate answer {a:?}")));
            }
            out.push(a);
        }
        if out.is_empty() {
            return Err(Error::arg("candidate set is empty"));
        }
        Ok(Self { answers: out })
    }

    /// One answer per line; blank lines skipped, later duplicates dropped.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut seen = HashSet::new();
        let answers: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && seen.insert(normalize_answer(l)))
            .collect();
        Self::new(answers)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// How per-slot log-probabilities of a multi-token answer are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub answer: String,
    pub log_prob: f64,
    pub all_scores: Vec<(String, f64)>,
}

pub fn select_answer(prompt: &AnswerPrompt, candidates: &CandidateSet, scorer: &dyn Scorer) -> Result<AnswerResult> {
    select_answer_with(prompt, candidates, scorer, Aggregation::Mean)
}

/// Argmax over candidates of the scorer's log-probability; ties go to the
/// earlier candidate.
///
/// A candidate spanning `m` tokens is scored against the prompt rendered
/// with `m` mask slots. Candidates sharing a slot count are scored in one
/// batch call.
pub fn select_answer_with(
    prompt: &AnswerPrompt,
    candidates: &CandidateSet,
    scorer: &dyn Scorer,
    aggregation: Aggregation,
) -> Result<AnswerResult> {
    if candidates.is_empty() {
        return Err(Error::arg("candidate set is empty"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.answers().iter().enumerate() {
        let m = scorer.count_tokens(c)?.max(1);
        groups.entry(m).or_default().push(i);
    }

    let mut scores = vec![0.0f64; candidates.len()];
    for (m, members) in groups {
        let p = if m == prompt.mask_count {
            prompt.clone()
        } else {
            prompt.with_mask_count(m)?
        };
        let text = p.render_with(scorer.mask_token());
        let batch: Vec<String> = members.iter().map(|&i| candidates.answers()[i].clone()).collect();
        let raw = scorer.score(&text, m, &batch)?;
        if raw.len() != batch.len() {
            return Err(Error::Backend {
                status: 200,
                body: format!("scorer returned {} scores for {} candidates", raw.len(), batch.len()),
            });
        }
        for (&i, lp) in members.iter().zip(raw) {
            if !lp.is_finite() {
                return Err(Error::Backend {
                    status: 200,
                    body: format!("non-finite score for candidate {:?}", candidates.answers()[i]),
                });
            }
            scores[i] = match aggregation {
                Aggregation::Mean => lp / m as f64,
                Aggregation::Sum => lp,
            };
        }
    }

    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(AnswerResult {
        answer: candidates.answers()[best].clone(),
        log_prob: scores[best],
        all_scores: candidates.answers().iter().cloned().zip(scores).collect(),
    })
}

/// Deterministic pseudo-embedding of `text`: FNV-1a seeds a SplitMix64
/// stream whose draws are mapped to `[-1, 1)` and L2-normalized.
pub fn mock_embed(text: &str, dim: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(fnv1a64(text.as_bytes()));
    let raw: Vec<f64> = (0..dim)
        .map(|_| rng.next_u64() as f64 / 18_446_744_073_709_551_616.0 * 2.0 - 1.0)
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| (v / norm) as f32).collect()
}

fn cosine64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    (dot / (l2_norm(a) * l2_norm(b))).clamp(-1.0, 1.0)
}

/// Hash-based stand-in for a masked LM: each candidate's log-probability is
/// `ln((s + 1) / 2 + 1e-9)` for `s` the cosine of the mock embeddings of the
/// prompt and the candidate.
pub fn mock_score(prompt: &str, candidates: &[String]) -> Vec<f64> {
    let p = mock_embed(prompt, MOCK_SCORE_DIM);
    candidates
        .iter()
        .map(|c| {
            let s = cosine64(&p, &mock_embed(c, MOCK_SCORE_DIM));
            ((s + 1.0) / 2.0 + 1e-9).ln()
        })
        .collect()
}

/// In-process mock of the encoder adapter.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub dim: usize,
}

impl MockBackend {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(MOCK_SCORE_DIM)
    }
}

impl Scorer for MockBackend {
    fn mask_token(&self) -> &str {
        DEFAULT_MASK_TOKEN
    }

    /// [`mock_score`] is taken as the per-slot log-probability, so the
    /// total over `mask_count` slots is that value times `mask_count`.
    fn score(&self, prompt: &str, mask_count: usize, candidates: &[String]) -> Result<Vec<f64>> {
        Ok(mock_score(prompt, candidates)
            .into_iter()
            .map(|lp| lp * mask_count as f64)
            .collect())
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(whitespace_tokens(text))
    }
}

/// Frame `t` of a mock video embeds as `"{video_id}:{t}"`.
pub fn mock_frame_key(video_id: &str, t: usize) -> String {
    format!("{video_id}:{t}")
}

impl Embedder for MockBackend {
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        let rows: Vec<Vec<f32>> = texts.iter().map(|t| mock_embed(t, self.dim)).collect();
        if rows.is_empty() {
            return EmbeddingMatrix::new(0, self.dim, Vec::new(), true);
        }
        EmbeddingMatrix::from_rows(&rows, true)
    }

    fn embed_frames(&self, video_id: &str, _frames_path: &Path, num_frames: usize) -> Result<FrameFeatures> {
        let rows: Vec<Vec<f32>> = (0..num_frames)
            .map(|t| mock_embed(&mock_frame_key(video_id, t), self.dim))
            .collect();
        FrameFeatures::new(video_id, EmbeddingMatrix::from_rows(&rows, true)?)
    }
}

/// Lowercased alphanumeric words of `text`.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Context-reading mock scorer: a candidate scores by how often its words
/// appear, as a contiguous phrase, in the prompt text after the mask. The
/// per-slot log-probability is `ln((hits + 1) / (W + 2))` with `W` the
/// number of words there, so it is always finite and negative.
#[derive(Debug, Clone, Default)]
pub struct OverlapScorer;

impl Scorer for OverlapScorer {
    fn mask_token(&self) -> &str {
        DEFAULT_MASK_TOKEN
    }

    fn score(&self, prompt: &str, mask_count: usize, candidates: &[String]) -> Result<Vec<f64>> {
        let hints = prompt
            .rfind(DEFAULT_MASK_TOKEN)
            .map_or(prompt, |i| &prompt[i + DEFAULT_MASK_TOKEN.len()..]);
        let hint_words = words(hints);
        let total = hint_words.len() as f64;
        Ok(candidates
            .iter()
            .map(|c| {
                let phrase = words(c);
                let hits = if phrase.is_empty() {
                    0
                } else {
                    hint_words.windows(phrase.len()).filter(|w| *w == phrase.as_slice()).count()
                };
                ((hits as f64 + 1.0) / (total + 2.0)).ln() * mask_count as f64
            })
            .collect())
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(whitespace_tokens(text))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backend: String,
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    texts: &'a [String],
}

#[derive(Serialize)]
struct EmbedFramesRequest<'a> {
    video_id: &'a str,
    frames_path: &'a str,
    num_frames: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    mask_count: usize,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    log_probs: Vec<f64>,
}

#[derive(Serialize)]
struct CountRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct CountResponse {
    count: usize,
}

/// Client for the encoder adapter's JSON-over-HTTP protocol.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    mask_token: String,
    max_retries: u32,
    backoff: Duration,
    max_batch: usize,
}

/// Connects a scorer to the adapter at `endpoint` (e.g. `http://127.0.0.1:8080`).
pub fn http_scorer(endpoint: &str) -> HttpBackend {
    HttpBackend::new(endpoint)
}

const BODY_EXCERPT: usize = 512;

impl HttpBackend {
    pub fn new(endpoint: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .timeout_connect(Some(Duration::from_secs(5)))
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            agent,
            mask_token: DEFAULT_MASK_TOKEN.to_owned(),
            max_retries: 3,
            backoff: Duration::from_millis(100),
            max_batch: 256,
        }
    }

    pub fn with_mask_token(mut self, mask: impl Into<String>) -> Self {
        self.mask_token = mask.into();
        self
    }

    /// Retries after the first attempt, with delays `backoff * 2^i`.
    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn transport(&self, detail: impl ToString) -> Error {
        Error::Transport {
            endpoint: self.endpoint.clone(),
            detail: detail.to_string(),
        }
    }

    /// Sends one request, retrying transport failures and 5xx/429 replies.
    fn request<Req, Resp>(&self, path: &str, body: Option<&Req>) -> Result<Resp>
    where
        Req: Serialize,
        Resp: for<'de> Deserialize<'de>,
    {
        let url = format!("{}{}", self.endpoint, path);
        let mut attempt = 0;
        loop {
            let sent = match body {
                Some(b) => self.agent.post(&url).send_json(b),
                None => self.agent.get(&url).call(),
            };
            let retryable = match sent {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<Resp>()
                            .map_err(|e| self.transport(format!("bad response body from {path}: {e}")));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let excerpt: String = text.chars().take(BODY_EXCERPT).collect();
                    let err = Error::Backend { status, body: excerpt };
                    if status >= 500 || status == 429 {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => self.transport(e),
            };
            if attempt >= self.max_retries {
                return Err(retryable);
            }
            let delay = self.backoff * 2u32.saturating_pow(attempt);
            log::debug!("{path} failed ({retryable}); retrying in {delay:?}");
            std::thread::sleep(delay);
            attempt += 1;
        }
    }

    pub fn health(&self) -> Result<Health> {
        self.request::<(), Health>("/health", None)
    }

    fn embeddings(&self, resp: EmbedResponse, expected_rows: usize) -> Result<EmbeddingMatrix> {
        if resp.embeddings.len() != expected_rows {
            return Err(Error::Backend {
                status: 200,
                body: format!("expected {expected_rows} embeddings, got {}", resp.embeddings.len()),
            });
        }
        if let Some(row) = resp.embeddings.iter().find(|r| r.len() != resp.dim) {
            return Err(Error::DimMismatch {
                expected: resp.dim,
                actual: row.len(),
            });
        }
        // Rows already unit-norm are kept bit-for-bit.
        match EmbeddingMatrix::from_rows(&resp.embeddings, true) {
            Ok(m) => Ok(m),
            Err(_) => normalize_rows(EmbeddingMatrix::from_rows(&resp.embeddings, false)?),
        }
    }
}

impl Scorer for HttpBackend {
    fn mask_token(&self) -> &str {
        &self.mask_token
    }

    fn score(&self, prompt: &str, mask_count: usize, candidates: &[String]) -> Result<Vec<f64>> {
        let resp: ScoreResponse = self.request(
            "/v1/score",
            Some(&ScoreRequest {
                prompt,
                mask_count,
                candidates,
            }),
        )?;
        Ok(resp.log_probs)
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        let resp: CountResponse = self.request("/v1/count_tokens", Some(&CountRequest { text }))?;
        Ok(resp.count)
    }
}

impl Embedder for HttpBackend {
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        let mut data = Vec::new();
        let mut dim = None;
        for chunk in texts.chunks(self.max_batch) {
            let resp: EmbedResponse = self.request("/v1/embed_text", Some(&EmbedTextRequest { texts: chunk }))?;
            let m = self.embeddings(resp, chunk.len())?;
            match dim {
                Some(d) if d != m.dim() => {
                    return Err(Error::DimMismatch {
                        expected: d,
                        actual: m.dim(),
                    })
                }
                _ => dim = Some(m.dim()),
            }
            data.extend(m.into_data());
        }
        let Some(dim) = dim else {
            return Err(Error::arg("nothing to embed"));
        };
        EmbeddingMatrix::new(texts.len(), dim, data, true)
    }

    fn embed_frames(&self, video_id: &str, frames_path: &Path, num_frames: usize) -> Result<FrameFeatures> {
        let path = frames_path.to_string_lossy();
        let resp: EmbedResponse = self.request(
            "/v1/embed_frames",
            Some(&EmbedFramesRequest {
                video_id,
                frames_path: &path,
                num_frames,
            }),
        )?;
        FrameFeatures::new(video_id, self.embeddings(resp, num_frames)?)
    }
}
