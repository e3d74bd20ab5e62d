//! Exact-match evaluation of the retrieve-then-answer pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer::{select_answer_with, Aggregation, AnswerResult, CandidateSet, Scorer};
use crate::context::{build_answer_prompt, build_context, truncate_to_budget, AnswerPrompt, DEFAULT_PROMPT_WORD};
use crate::corpus::{load_vectors, CorpusIndex};
use crate::error::{Error, Result};
use crate::par;
use crate::retrieval::{dedup_captions, random_video_context, retrieve_video, FrameFeatures};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub video_id: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(what, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads a `{"video_id", "question", "answer", "type"?}` JSONL dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<QaRecord>> {
    let records: Vec<QaRecord> = read_jsonl(path, "dataset")?;
    for (i, r) in records.iter().enumerate() {
        if r.video_id.trim().is_empty() || r.question.trim().is_empty() {
            return Err(Error::format("dataset", format!("record {i} has an empty video_id or question")));
        }
    }
    Ok(records)
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// Source of per-video frame embeddings.
pub trait FrameSource: Sync {
    fn frames(&self, video_id: &str) -> Result<FrameFeatures>;
}

impl FrameSource for HashMap<String, FrameFeatures> {
    fn frames(&self, video_id: &str) -> Result<FrameFeatures> {
        self.get(video_id)
            .cloned()
            .ok_or_else(|| Error::arg(format!("no frame features for video {video_id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub num_frames: usize,
}

/// Frame features stored as vector files listed in a JSONL manifest.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone)]
pub struct FrameManifest {
    entries: HashMap<String, ManifestEntry>,
}

impl FrameManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let list: Vec<ManifestEntry> = read_jsonl(path, "manifest")?;
        let mut entries = HashMap::new();
        for mut e in list {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if entries.insert(e.video_id.clone(), e).is_some() {
                return Err(Error::format("manifest", "duplicate video_id"));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FrameSource for FrameManifest {
    fn frames(&self, video_id: &str) -> Result<FrameFeatures> {
        let entry = self
            .entries
            .get(video_id)
            .ok_or_else(|| Error::arg(format!("video {video_id:?} is not in the frame manifest")))?;
        let m = load_vectors(&entry.path)?;
        if m.count() != entry.num_frames {
            return Err(Error::format(
                "num_frames",
                format!("{video_id}: manifest says {}, file has {}", entry.num_frames, m.count()),
            ));
        }
        FrameFeatures::new(video_id, m)
    }
}

/// Where the hint captions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ContextMode {
    Retrieval,
    /// Random corpus captions instead of retrieved ones.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub prompt_word: String,
    pub token_budget: usize,
    pub context: ContextMode,
    pub aggregation: Aggregation,
    /// Compare answers verbatim instead of normalized.
    pub strict: bool,
    pub fail_fast: bool,
    pub keep_items: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            prompt_word: DEFAULT_PROMPT_WORD.to_owned(),
            token_budget: 500,
            context: ContextMode::Retrieval,
            aggregation: Aggregation::Mean,
            strict: false,
            fail_fast: false,
            keep_items: true,
        }
    }
}

/// Everything needed to answer questions about indexed videos.
pub struct Pipeline<'a> {
    pub index: &'a CorpusIndex,
    pub frames: &'a dyn FrameSource,
    pub candidates: &'a CandidateSet,
    pub scorer: &'a dyn Scorer,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answered {
    pub prompt: AnswerPrompt,
    pub result: AnswerResult,
}

impl Pipeline<'_> {
    /// Hint captions for a video, first-occurrence order, 1-based frames.
    pub fn captions(&self, frames: &FrameFeatures) -> Result<Vec<(usize, String)>> {
        match self.config.context {
            ContextMode::Retrieval => {
                let r = retrieve_video(self.index, frames, self.config.k)?;
                Ok(dedup_captions(&r, self.index.corpus()))
            }
            ContextMode::Random { seed } => random_video_context(
                self.index.corpus(),
                &frames.video_id,
                frames.num_frames(),
                self.config.k,
                seed,
            ),
        }
    }

    /// Retrieve, dedup, build context and prompt, truncate, then score.
    pub fn answer(&self, video_id: &str, question: &str) -> Result<Answered> {
        let frames = self.frames.frames(video_id)?;
        let captions = self.captions(&frames)?;
        let context = build_context(&captions, frames.num_frames())?;
        let prompt = build_answer_prompt(question, context, &self.config.prompt_word, 1)?;
        let prompt = truncate_to_budget(&prompt, self.config.token_budget, |t| self.scorer.count_tokens(t))?;
        let result = select_answer_with(&prompt, self.candidates, self.scorer, self.config.aggregation)?;
        Ok(Answered { prompt, result })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub video_id: String,
    pub question: String,
    pub prediction: Option<String>,
    pub gold: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub index: usize,
    pub video_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// `correct / total`, null for an empty run.
    pub accuracy: Option<f64>,
    pub per_type: BTreeMap<String, TypeStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_item: Option<Vec<ItemResult>>,
    #[serde(default)]
    pub errors: Vec<RecordError>,
}

fn ratio(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the pipeline over every record and scores exact-match accuracy.
///
/// Records are answered concurrently; counts are merged in record order.
/// A failing record counts as incorrect and is listed under `errors`
/// unless `fail_fast` is set.
pub fn evaluate(records: &[QaRecord], pipeline: &Pipeline<'_>) -> Result<EvalReport> {
    let outcomes = par::map(records, |r| pipeline.answer(&r.video_id, &r.question));
    let cfg = &pipeline.config;

    let mut report = EvalReport {
        total: records.len(),
        correct: 0,
        accuracy: None,
        per_type: BTreeMap::new(),
        per_item: cfg.keep_items.then(Vec::new),
        errors: Vec::new(),
    };
    for (i, (record, outcome)) in records.iter().zip(outcomes).enumerate() {
        let prediction = match outcome {
            Ok(a) => Some(a.result.answer),
            Err(e) if cfg.fail_fast => return Err(e),
            Err(e) => {
                log::warn!("record {i} ({}) failed: {e}", record.video_id);
                report.errors.push(RecordError {
                    index: i,
                    video_id: record.video_id.clone(),
                    error: e.to_string(),
                });
                None
            }
        };
        let correct = prediction.as_deref().is_some_and(|p| {
            if cfg.strict {
                p == record.answer
            } else {
                exact_match(p, &record.answer)
            }
        });
        report.correct += usize::from(correct);
        if let Some(t) = &record.answer_type {
            let s = report.per_type.entry(t.clone()).or_insert(TypeStats {
                total: 0,
                correct: 0,
                accuracy: None,
            });
            s.total += 1;
            s.correct += usize::from(correct);
        }
        if let Some(items) = report.per_item.as_mut() {
            items.push(ItemResult {
                video_id: record.video_id.clone(),
                question: record.question.clone(),
                prediction,
                gold: record.answer.clone(),
                correct,
            });
        }
    }
    report.accuracy = ratio(report.correct, report.total);
    for s in report.per_type.values_mut() {
        s.accuracy = ratio(s.correct, s.total);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDelta {
    /// `b.accuracy - a.accuracy`.
    pub overall: f64,
    pub per_type: BTreeMap<String, f64>,
    /// Items whose correctness differs between the runs.
    pub flipped: usize,
    /// Items wrong in `a` and right in `b`.
    pub gained: usize,
    /// Items right in `a` and wrong in `b`.
    pub lost: usize,
}

/// Accuracy deltas from run `a` to run `b` over the same record set.
pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<RunDelta> {
    let (Some(ia), Some(ib)) = (&a.per_item, &b.per_item) else {
        return Err(Error::arg("both reports need per-item results to be compared"));
    };
    let key = |i: &ItemResult| (i.video_id.clone(), i.question.clone(), i.gold.clone());
    let mut sa: Vec<_> = ia.iter().map(|i| (key(i), i.correct)).collect();
    let mut sb: Vec<_> = ib.iter().map(|i| (key(i), i.correct)).collect();
    sa.sort();
    sb.sort();
    if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(x, y)| x.0 != y.0) {
        return Err(Error::arg("reports cover different record sets"));
    }
    if a.per_type.keys().ne(b.per_type.keys()) {
        return Err(Error::arg("reports cover different answer types"));
    }
    // Sorting puts incorrect before correct within equal keys, so duplicate
    // records pair up by outcome.
    let gained = sa.iter().zip(&sb).filter(|(x, y)| !x.1 && y.1).count();
    let lost = sa.iter().zip(&sb).filter(|(x, y)| x.1 && !y.1).count();
    let acc = |r: Option<f64>| r.unwrap_or(0.0);
    let per_type = a
        .per_type
        .iter()
        .map(|(t, sa)| (t.clone(), acc(b.per_type[t].accuracy) - acc(sa.accuracy)))
        .collect();
    Ok(RunDelta {
        overall: acc(b.accuracy) - acc(a.accuracy),
        per_type,
        flipped: gained + lost,
        gained,
        lost,
    })
}
