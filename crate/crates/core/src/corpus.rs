//! Caption corpus ingestion, embedding matrices and on-disk persistence.
//!
//! An index directory holds two files:
//!
//! ```text
//! vectors.r2av   little-endian binary
//!   magic    b"R2AV"   4 bytes
//!   version  u32       4 bytes
//!   count    u64       8 bytes
//!   dim      u32       4 bytes
//!   flags    u32       4 bytes   (bit 0 = rows are unit-normalized)
//!   rows     count * dim f32, row-major
//! texts.jsonl    one {"id": i, "text": "..."} object per line
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VECTOR_MAGIC: [u8; 4] = *b"R2AV";
pub const VECTOR_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const FLAG_NORMALIZED: u32 = 1;

pub const VECTORS_FILE: &str = "vectors.r2av";
pub const TEXTS_FILE: &str = "texts.jsonl";

/// Rows whose norm falls below this are rejected by [`normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;
/// Accepted deviation of a row norm from 1.0 for data flagged normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: usize,
    pub text: String,
}

/// Ordered caption corpus with ids `0..N`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCorpus {
    entries: Vec<CorpusEntry>,
    skipped_empty: usize,
}

impl TextCorpus {
    /// Builds a corpus from already-clean texts, rejecting blank entries.
    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut entries = Vec::new();
        for (id, text) in texts.into_iter().enumerate() {
            let text = text.into();
            if text.trim().is_empty() {
                return Err(Error::arg(format!("corpus entry {id} is empty")));
            }
            entries.push(CorpusEntry { id, text });
        }
        Ok(Self {
            entries,
            skipped_empty: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn text(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.text.as_str())
    }

    /// Number of blank lines dropped during ingestion.
    pub fn skipped_empty(&self) -> usize {
        self.skipped_empty
    }
}

/// Ingests raw lines: trims each, drops empty ones, assigns ids in order.
///
/// Lines are raw bytes so that invalid UTF-8 can be reported with its
/// 1-based line number.
pub fn ingest_texts<I, L>(lines: I) -> Result<TextCorpus>
where
    I: IntoIterator<Item = L>,
    L: AsRef<[u8]>,
{
    let mut corpus = TextCorpus::default();
    for (idx, raw) in lines.into_iter().enumerate() {
        let line = std::str::from_utf8(raw.as_ref()).map_err(|_| Error::Decode { line: idx + 1 })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            corpus.skipped_empty += 1;
            continue;
        }
        let id = corpus.entries.len();
        corpus.entries.push(CorpusEntry {
            id,
            text: trimmed.to_owned(),
        });
    }
    Ok(corpus)
}

/// Reads a newline-delimited text file and ingests it.
pub fn ingest_file(path: &Path) -> Result<TextCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).split(b'\n') {
        let mut line = line.map_err(|e| Error::io(path, e))?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        lines.push(line);
    }
    ingest_texts(lines)
}

/// Dense row-major `count x dim` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("embedding dimension must be at least 1"));
        }
        if data.len() != count * dim {
            return Err(Error::arg(format!(
                "matrix data has {} values, expected {count} x {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("row {} contains a non-finite value", pos / dim)));
        }
        let m = Self {
            count,
            dim,
            data,
            normalized,
        };
        if normalized {
            m.check_unit_rows()?;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>], normalized: bool) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::arg(format!("row {i} has length {}, expected {dim}", r.len())));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), dim, data, normalized)
    }

    fn check_unit_rows(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            let norm = l2_norm(row);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::arg(format!(
                    "row {i} flagged normalized but has norm {norm}"
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Divides every row by its L2 norm.
pub fn normalize_rows(mut m: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let dim = m.dim;
    for (i, row) in m.data.chunks_exact_mut(dim).enumerate() {
        let norm = l2_norm(row);
        if norm < MIN_ROW_NORM {
            return Err(Error::ZeroNorm { row: i });
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    m.normalized = true;
    Ok(m)
}

/// Splits `[0, n)` into `shards` contiguous, near-equal ranges.
///
/// Empty ranges are never produced, so fewer than `shards` ranges come back
/// when `n < shards`.
pub fn shard_ranges(n: usize, shards: usize) -> Vec<Range<usize>> {
    let shards = shards.clamp(1, n.max(1));
    let base = n / shards;
    let extra = n % shards;
    let mut start = 0;
    (0..shards)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .filter(|r| !r.is_empty())
        .collect()
}

/// Shard count used when the caller does not choose one.
pub fn default_shard_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        std::thread::available_parallelism().map_or(1, usize::from)
    }
}

/// Normalized embeddings paired with their source captions.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    corpus: TextCorpus,
    embeddings: EmbeddingMatrix,
    shards: Vec<Range<usize>>,
}

impl CorpusIndex {
    /// Pairs a corpus with its embeddings, normalizing rows if needed.
    pub fn new(corpus: TextCorpus, embeddings: EmbeddingMatrix) -> Result<Self> {
        if embeddings.count() != corpus.len() {
            return Err(Error::arg(format!(
                "row count mismatch: {} texts but {} embedding rows",
                corpus.len(),
                embeddings.count()
            )));
        }
        let embeddings = if embeddings.is_normalized() {
            embeddings
        } else {
            normalize_rows(embeddings)?
        };
        let shards = shard_ranges(corpus.len(), default_shard_count());
        Ok(Self {
            corpus,
            embeddings,
            shards,
        })
    }

    /// Re-partitions the rows into `shards` contiguous ranges.
    pub fn with_shards(mut self, shards: usize) -> Self {
        self.set_shards(shards);
        self
    }

    pub fn set_shards(&mut self, shards: usize) {
        self.shards = shard_ranges(self.len(), shards);
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn corpus(&self) -> &TextCorpus {
        &self.corpus
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn shards(&self) -> &[Range<usize>] {
        &self.shards
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_index(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_index(dir)
    }
}

/// Writes a matrix in the `R2AV` vector format.
pub fn write_vectors<W: Write>(mut w: W, m: &EmbeddingMatrix) -> std::io::Result<()> {
    w.write_all(&VECTOR_MAGIC)?;
    w.write_all(&VECTOR_VERSION.to_le_bytes())?;
    w.write_all(&(m.count() as u64).to_le_bytes())?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    let flags = if m.is_normalized() { FLAG_NORMALIZED } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn save_vectors(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_vectors(BufWriter::new(file), m).map_err(|e| Error::io(path, e))
}

/// Parses an `R2AV` byte buffer, validating the header against the payload.
pub fn decode_vectors(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if bytes[0..4] != VECTOR_MAGIC {
        return Err(Error::format("magic", format!("expected R2AV, found {:?}", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VECTOR_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32_at(16);
    let flags = u32_at(20);
    if dim == 0 {
        return Err(Error::format("dim", "dimension is zero"));
    }
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::format("flags", format!("unknown flag bits {flags:#x}")));
    }
    let payload = (bytes.len() - HEADER_LEN) as u64;
    let expected = count
        .checked_mul(u64::from(dim))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format("count", "count * dim overflows"))?;
    if payload != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: payload,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(count as usize, dim as usize, data, flags & FLAG_NORMALIZED != 0)
        .map_err(|e| Error::format("rows", e.to_string()))
}

pub fn load_vectors(path: &Path) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_vectors(&bytes)
}

pub fn save_texts(path: &Path, corpus: &TextCorpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for entry in corpus.entries() {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_texts(path: &Path) -> Result<TextCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Decode { line: lineno + 1 },
            _ => Error::io(path, e),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format("text", format!("line {}: {e}", lineno + 1)))?;
        if entry.id != entries.len() {
            return Err(Error::format(
                "id",
                format!("line {}: expected id {}, found {}", lineno + 1, entries.len(), entry.id),
            ));
        }
        entries.push(entry);
    }
    TextCorpus::from_texts(entries.into_iter().map(|e| e.text))
        .map_err(|e| Error::format("text", e.to_string()))
}

pub fn save_index(index: &CorpusIndex, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_vectors(&dir.join(VECTORS_FILE), &index.embeddings)?;
    save_texts(&dir.join(TEXTS_FILE), &index.corpus)
}

pub fn load_index(dir: &Path) -> Result<CorpusIndex> {
    let embeddings = load_vectors(&dir.join(VECTORS_FILE))?;
    let corpus = load_texts(&dir.join(TEXTS_FILE))?;
    if !embeddings.is_normalized() {
        return Err(Error::format("flags", "index vectors are not flagged normalized"));
    }
    if embeddings.count() != corpus.len() {
        return Err(Error::format(
            "count",
            format!("{} vectors but {} texts", embeddings.count(), corpus.len()),
        ));
    }
    CorpusIndex::new(corpus, embeddings)
}
