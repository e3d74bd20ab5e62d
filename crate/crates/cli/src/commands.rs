use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::json;

use r2a_core::answer::{CandidateSet, Embedder, HttpBackend, MockBackend, OverlapScorer, Scorer};
use r2a_core::corpus::{ingest_file, load_index, load_vectors, CorpusIndex, EmbeddingMatrix, TextCorpus};
use r2a_core::eval::{evaluate, ContextMode, EvalConfig, FrameManifest, Pipeline};
use r2a_core::fixture::MockFixture;
use r2a_core::retrieval::{normalized, retrieve_video, topk_normalized, topk_normalized_sequential, FrameFeatures};
use r2a_core::rng::{fnv1a64, SplitMix64};
use r2a_core::{is_parallel, with_threads, Aggregation, Error, Result};

use crate::{
    AggregationArg, AnswerArgs, AnswerOpts, Baseline, BenchArgs, BuildIndexArgs, EvalArgs, FixtureArgs, FrameInput,
    RetrievalOpts, RetrieveArgs,
};

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })
}

fn emit_json(value: &serde_json::Value) -> Result<()> {
    emit(&format!("{value}\n"))
}

fn http_endpoint(arg: &str) -> Option<&str> {
    if let Some(url) = arg.strip_prefix("http:") {
        if !url.starts_with("//") {
            return Some(url);
        }
    }
    (arg.starts_with("http://") || arg.starts_with("https://")).then_some(arg)
}

fn scorer_for(arg: &str) -> Result<Box<dyn Scorer>> {
    match arg {
        "mock" => Ok(Box::new(MockBackend::default())),
        "overlap" => Ok(Box::new(OverlapScorer)),
        s => match http_endpoint(s) {
            Some(url) => Ok(Box::new(HttpBackend::new(url))),
            None => Err(Error::Argument(format!("unknown scorer {s:?}; expected mock, overlap or http:URL"))),
        },
    }
}

fn embedder_for(arg: &str, dim: usize) -> Result<Box<dyn Embedder>> {
    match arg {
        "mock" => Ok(Box::new(MockBackend::new(dim))),
        s => match http_endpoint(s) {
            Some(url) => Ok(Box::new(HttpBackend::new(url))),
            None => Err(Error::Argument(format!("unknown embedder {s:?}; expected mock or http:URL"))),
        },
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn load_frames(input: &FrameInput, dim: usize) -> Result<FrameFeatures> {
    if let Some(path) = &input.frames {
        let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        return FrameFeatures::new(id, load_vectors(path)?);
    }
    let (Some(video_id), Some(backend)) = (&input.video_id, &input.embed_frames) else {
        return Err(Error::Argument("either --frames or --video-id with --embed-frames is required".into()));
    };
    let video = input.video.clone().unwrap_or_default();
    embedder_for(backend, dim)?.embed_frames(video_id, &video, input.num_frames)
}

fn open_index(opts: &RetrievalOpts) -> Result<CorpusIndex> {
    let mut index = load_index(&opts.index)?;
    let shards = match (opts.shards, opts.threads) {
        (0, 0) => index.shards().len(),
        (0, t) => t,
        (s, _) => s,
    };
    index.set_shards(shards);
    log::info!("index {}: {} rows x {} dims, {} shards", opts.index.display(), index.len(), index.dim(), shards);
    Ok(index)
}

pub fn build_index(args: BuildIndexArgs) -> Result<()> {
    let corpus = ingest_file(&args.texts)?;
    let embeddings = match (&args.embeddings, &args.embed_with) {
        (Some(path), _) => load_vectors(path)?,
        (None, Some(backend)) => {
            let texts: Vec<String> = corpus.entries().iter().map(|e| e.text.clone()).collect();
            embedder_for(backend, args.dim)?.embed_texts(&texts)?
        }
        (None, None) => return Err(Error::Argument("one of --embeddings or --embed-with is required".into())),
    };
    let skipped = corpus.skipped_empty();
    let mut index = CorpusIndex::new(corpus, embeddings)?;
    if args.shards > 0 {
        index.set_shards(args.shards);
    }
    index.save(&args.out)?;
    let shards: Vec<[usize; 2]> = index.shards().iter().map(|r| [r.start, r.end]).collect();
    emit_json(&json!({
        "n": index.len(),
        "d": index.dim(),
        "shards": shards,
        "skipped_empty": skipped,
        "out": args.out,
    }))
}

pub fn retrieve(args: RetrieveArgs) -> Result<()> {
    let index = open_index(&args.retrieval)?;
    let frames = load_frames(&args.input, index.dim())?;
    let k = args.retrieval.k;
    let r = with_threads(args.retrieval.threads, || retrieve_video(&index, &frames, k))?;
    emit(&r.to_jsonl(index.corpus())?)
}

fn eval_config(retrieval: &RetrievalOpts, answer: &AnswerOpts) -> EvalConfig {
    EvalConfig {
        k: retrieval.k,
        prompt_word: answer.prompt_word.clone(),
        token_budget: answer.token_budget,
        aggregation: match answer.aggregation {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Sum => Aggregation::Sum,
        },
        ..EvalConfig::default()
    }
}

fn load_candidates(path: &Path) -> Result<CandidateSet> {
    CandidateSet::from_lines(&read_to_string(path)?)
}

pub fn answer(args: AnswerArgs) -> Result<()> {
    let index = open_index(&args.retrieval)?;
    let frames = load_frames(&args.input, index.dim())?;
    let candidates = load_candidates(&args.answer.candidates)?;
    let scorer = scorer_for(&args.answer.scorer)?;
    let video_id = frames.video_id.clone();
    let source: HashMap<String, FrameFeatures> = HashMap::from([(video_id.clone(), frames)]);
    let pipeline = Pipeline {
        index: &index,
        frames: &source,
        candidates: &candidates,
        scorer: scorer.as_ref(),
        config: eval_config(&args.retrieval, &args.answer),
    };
    let answered = with_threads(args.retrieval.threads, || pipeline.answer(&video_id, &args.question))?;
    let scores: Vec<_> = answered
        .result
        .all_scores
        .iter()
        .map(|(c, s)| json!({"candidate": c, "log_prob": s}))
        .collect();
    let debug = json!({
        "answer": answered.result.answer,
        "log_prob": answered.result.log_prob,
        "scores": scores,
        "prompt": answered.prompt.render_with(scorer.mask_token()),
        "captions": answered.prompt.context.segments.len(),
    });
    emit(&format!("{}\n{debug}\n", answered.result.answer))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let index = open_index(&args.retrieval)?;
    let records = r2a_core::eval::load_dataset(&args.dataset)?;
    let manifest = FrameManifest::load(&args.frames_manifest)?;
    let candidates = load_candidates(&args.answer.candidates)?;
    let scorer = scorer_for(&args.answer.scorer)?;
    let config = EvalConfig {
        context: match args.baseline {
            Baseline::Retrieval => ContextMode::Retrieval,
            Baseline::Random => ContextMode::Random { seed: args.seed },
        },
        strict: args.strict,
        fail_fast: args.fail_fast,
        keep_items: !args.no_items,
        ..eval_config(&args.retrieval, &args.answer)
    };
    let pipeline = Pipeline {
        index: &index,
        frames: &manifest,
        candidates: &candidates,
        scorer: scorer.as_ref(),
        config,
    };
    let report = with_threads(args.retrieval.threads, || evaluate(&records, &pipeline))?;
    let text = report.to_json()? + "\n";
    match &args.report {
        Some(path) => {
            fs::write(path, &text).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            emit_json(&json!({
                "total": report.total,
                "correct": report.correct,
                "accuracy": report.accuracy,
                "errors": report.errors.len(),
                "report": path,
            }))
        }
        None => emit(&text),
    }
}

fn parse_shape(arg: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("--synthetic expects ROWSxDIM, got {arg:?}"));
    let (r, d) = arg.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let dim: usize = d.trim().parse().map_err(|_| bad())?;
    if rows == 0 || dim == 0 {
        return Err(bad());
    }
    Ok((rows, dim))
}

fn synthetic_index(rows: usize, dim: usize, seed: u64) -> Result<CorpusIndex> {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f32> = (0..rows * dim).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
    let corpus = TextCorpus::from_texts((0..rows).map(|i| format!("synthetic caption {i}")))?;
    CorpusIndex::new(corpus, EmbeddingMatrix::new(rows, dim, data, false)?)
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn bench(args: BenchArgs) -> Result<()> {
    if args.queries == 0 {
        return emit_json(&json!({"queries": 0, "median_ms": null, "p99_ms": null, "qps": null}));
    }
    let mut index = match (&args.index, &args.synthetic) {
        (Some(dir), _) => load_index(dir)?,
        (None, Some(shape)) => {
            let (rows, dim) = parse_shape(shape)?;
            synthetic_index(rows, dim, args.seed)?
        }
        (None, None) => return Err(Error::Argument("one of --index or --synthetic is required".into())),
    };
    let threads = args.threads.max(1);
    index.set_shards(if args.shards > 0 { args.shards } else { threads });

    let mut rng = SplitMix64::new(args.seed ^ 0x5eed_0f_9e7a);
    let queries: Vec<Vec<f32>> = (0..args.queries)
        .map(|_| {
            let q: Vec<f32> = (0..index.dim()).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
            normalized(&q)
        })
        .collect::<Result<_>>()?;

    let k = args.k;
    let (latencies, wall, digest) = with_threads(threads, || -> Result<_> {
        let mut latencies = Vec::with_capacity(args.queries * args.repeat);
        let mut digest_bytes = Vec::new();
        let start = Instant::now();
        for pass in 0..args.repeat {
            for q in &queries {
                let t = Instant::now();
                let hits = if threads == 1 {
                    topk_normalized_sequential(&index, q, k)?
                } else {
                    topk_normalized(&index, q, k)?
                };
                latencies.push(t.elapsed());
                if pass == 0 {
                    for h in &hits {
                        digest_bytes.extend_from_slice(&(h.corpus_id as u64).to_le_bytes());
                        digest_bytes.extend_from_slice(&h.score.to_bits().to_le_bytes());
                    }
                }
            }
        }
        Ok((latencies, start.elapsed(), fnv1a64(&digest_bytes)))
    })?;

    let mut sorted = latencies.clone();
    sorted.sort();
    let median = sorted[sorted.len() / 2];
    let p99 = sorted[(sorted.len() * 99).div_ceil(100) - 1];
    let mean = latencies.iter().sum::<Duration>() / latencies.len() as u32;
    emit_json(&json!({
        "rows": index.len(),
        "dim": index.dim(),
        "queries": args.queries,
        "repeat": args.repeat,
        "k": k,
        "threads": threads,
        "shards": index.shards().len(),
        "parallel_build": is_parallel(),
        "median_ms": millis(median),
        "p99_ms": millis(p99),
        "mean_ms": millis(mean),
        "max_ms": millis(*sorted.last().unwrap()),
        "qps": latencies.len() as f64 / wall.as_secs_f64(),
        "digest": format!("{digest:016x}"),
    }))
}

pub fn fixture(args: FixtureArgs) -> Result<()> {
    let files = MockFixture::generate()?.write(&args.out)?;
    emit_json(&json!({
        "captions": files.captions,
        "index": files.index_dir,
        "frames_manifest": files.manifest,
        "dataset": files.dataset,
        "candidates": files.candidates,
        "k": r2a_core::fixture::FIXTURE_K,
    }))
}
