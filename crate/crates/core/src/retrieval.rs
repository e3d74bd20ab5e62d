//! Exact cosine top-k retrieval of corpus captions per video frame.
//!
//! Corpus rows are stored unit-normalized, so cosine similarity reduces to a
//! dot product. Each shard keeps a bounded heap of its best `k` rows; shard
//! results are merged under the same total order (score descending, corpus
//! id ascending), which makes the output independent of the shard layout
//! and of the thread count.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{l2_norm, CorpusIndex, EmbeddingMatrix, TextCorpus, MIN_ROW_NORM};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{fnv1a64, SplitMix64};

/// Frame embeddings for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub video_id: String,
    frames: EmbeddingMatrix,
}

impl FrameFeatures {
    pub fn new(video_id: impl Into<String>, frames: EmbeddingMatrix) -> Result<Self> {
        if frames.count() == 0 {
            return Err(Error::arg("a video needs at least one frame"));
        }
        Ok(Self {
            video_id: video_id.into(),
            frames,
        })
    }

    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self> {
        Self::new(video_id, EmbeddingMatrix::from_rows(rows, false)?)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.count()
    }

    pub fn dim(&self) -> usize {
        self.frames.dim()
    }

    pub fn is_normalized(&self) -> bool {
        self.frames.is_normalized()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub corpus_id: usize,
    pub score: f32,
    /// 1-based position within the frame's list.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRetrieval {
    pub k: usize,
    pub per_frame: Vec<Vec<Hit>>,
}

#[derive(Serialize)]
struct HitRecord<'a> {
    id: usize,
    score: f32,
    text: &'a str,
}

#[derive(Serialize)]
struct FrameRecord<'a> {
    frame: usize,
    hits: Vec<HitRecord<'a>>,
}

impl VideoRetrieval {
    pub fn num_frames(&self) -> usize {
        self.per_frame.len()
    }

    /// One `{"frame": t, "hits": [...]}` line per frame, frames 1-based.
    pub fn to_jsonl(&self, corpus: &TextCorpus) -> Result<String> {
        let mut out = String::new();
        for (t, hits) in self.per_frame.iter().enumerate() {
            let record = FrameRecord {
                frame: t + 1,
                hits: hits
                    .iter()
                    .map(|h| HitRecord {
                        id: h.corpus_id,
                        score: h.score,
                        text: corpus.text(h.corpus_id).unwrap_or_default(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Cosine similarity of two vectors.
pub fn similarity(z: &[f32], v: &[f32]) -> Result<f32> {
    if z.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: z.len(),
            actual: v.len(),
        });
    }
    let (nz, nv) = (l2_norm(z), l2_norm(v));
    if nz < MIN_ROW_NORM || nv < MIN_ROW_NORM {
        return Err(Error::arg("similarity of a zero-norm vector is undefined"));
    }
    let dot: f64 = z.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok((dot / (nz * nv)) as f32)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

/// Returns `v / ||v||`.
pub fn normalized(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if norm < MIN_ROW_NORM {
        return Err(Error::arg("query vector has zero norm"));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Heap entry ordered so that the *worst* hit compares greatest.
#[derive(Clone, Copy)]
struct Ranked {
    score: f32,
    id: usize,
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

/// Best `k` rows of `rows` for a unit query, best first.
fn scan_shard(matrix: &EmbeddingMatrix, rows: Range<usize>, query: &[f32], k: usize) -> Vec<Ranked> {
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
    for id in rows {
        // `+ 0.0` folds -0.0 into +0.0 so ties compare by id only.
        let score = dot(matrix.row(id), query) + 0.0;
        let cand = Ranked { score, id };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(mut worst) = heap.peek_mut() {
            if cand < *worst {
                *worst = cand;
            }
        }
    }
    heap.into_sorted_vec()
}

fn merge(shard_lists: Vec<Vec<Ranked>>, k: usize) -> Vec<Hit> {
    let mut all: Vec<Ranked> = shard_lists.into_iter().flatten().collect();
    all.sort_unstable();
    all.truncate(k);
    all.into_iter()
        .enumerate()
        .map(|(i, r)| Hit {
            corpus_id: r.id,
            score: r.score,
            rank: i + 1,
        })
        .collect()
}

fn check_query(index: &CorpusIndex, query: &[f32], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if index.is_empty() {
        return Err(Error::arg("cannot search an empty index"));
    }
    if query.len() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            actual: query.len(),
        });
    }
    Ok(())
}

/// Top-`k` search for an already unit-normalized query, shards scanned in
/// parallel when the `parallel` feature is enabled.
pub fn topk_normalized(index: &CorpusIndex, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    check_query(index, query, k)?;
    let m = index.embeddings();
    let lists = par::map(index.shards(), |r| scan_shard(m, r.clone(), query, k));
    Ok(merge(lists, k))
}

/// Same result as [`topk_normalized`], always scanning shards on the calling
/// thread.
pub fn topk_normalized_sequential(index: &CorpusIndex, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    check_query(index, query, k)?;
    let m = index.embeddings();
    let lists = index
        .shards()
        .iter()
        .map(|r| scan_shard(m, r.clone(), query, k))
        .collect();
    Ok(merge(lists, k))
}

/// The `min(k, N)` most similar corpus rows to `query`.
///
/// The query is normalized first; its scale does not matter.
pub fn topk_frame(index: &CorpusIndex, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    check_query(index, query, k)?;
    topk_normalized(index, &normalized(query)?, k)
}

/// Sequential counterpart of [`topk_frame`].
pub fn topk_frame_sequential(index: &CorpusIndex, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    check_query(index, query, k)?;
    topk_normalized_sequential(index, &normalized(query)?, k)
}

/// Per-frame top-`k` lists, in frame order.
pub fn retrieve_video(index: &CorpusIndex, frames: &FrameFeatures, k: usize) -> Result<VideoRetrieval> {
    if frames.dim() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            actual: frames.dim(),
        });
    }
    let rows: Vec<&[f32]> = frames.matrix().rows().collect();
    let unit = frames.is_normalized();
    let per_frame = par::map(&rows, |z| {
        if unit {
            topk_normalized(index, z, k)
        } else {
            topk_frame(index, z, k)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(VideoRetrieval { k, per_frame })
}

/// Distinct captions across all frames in first-occurrence order, each
/// tagged with the 1-based frame where it first appeared.
pub fn dedup_captions(retrieval: &VideoRetrieval, corpus: &TextCorpus) -> Vec<(usize, String)> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = Vec::new();
    for (t, hits) in retrieval.per_frame.iter().enumerate() {
        for hit in hits {
            let Some(text) = corpus.text(hit.corpus_id) else {
                continue;
            };
            if seen.insert(text) {
                out.push((t + 1, text.to_owned()));
            }
        }
    }
    out
}

/// `k` distinct corpus ids drawn uniformly without replacement.
pub fn random_sample_ids(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::arg(format!("cannot sample {k} entries from a corpus of {n}")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.next_below((n - i) as u64) as usize;
        ids.swap(i, j);
    }
    ids.truncate(k);
    Ok(ids)
}

/// Random-caption baseline: `k` distinct corpus texts for a given seed.
pub fn random_sample(corpus: &TextCorpus, k: usize, seed: u64) -> Result<Vec<String>> {
    Ok(random_sample_ids(corpus.len(), k, seed)?
        .into_iter()
        .map(|id| corpus.entries()[id].text.clone())
        .collect())
}

/// Random-caption stand-in for [`retrieve_video`]: each of the `num_frames`
/// frames gets `k` captions, drawn without replacement across the whole
/// video (clamped to the corpus size). The draw is seeded by `seed` mixed
/// with the video id so distinct videos get distinct samples.
pub fn random_video_context(
    corpus: &TextCorpus,
    video_id: &str,
    num_frames: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<(usize, String)>> {
    if k == 0 || num_frames == 0 {
        return Err(Error::arg("k and the frame count must be at least 1"));
    }
    let total = (k * num_frames).min(corpus.len());
    let ids = random_sample_ids(corpus.len(), total, seed ^ fnv1a64(video_id.as_bytes()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, id) in ids.into_iter().enumerate() {
        let text = &corpus.entries()[id].text;
        if seen.insert(text.as_str()) {
            out.push((i / k + 1, text.clone()));
        }
    }
    Ok(out)
}
