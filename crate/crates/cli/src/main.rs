//! `r2a`: build caption indexes, retrieve, answer and evaluate from the
//! command line. JSON goes to stdout, logs to stderr.
//!
//! Exit codes: 0 success, 1 I/O, 2 validation, 3 backend transport.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use r2a_core::Error;

#[derive(Parser, Debug)]
#[command(name = "r2a", version, about = "Retrieve-then-answer engine for zero-shot video QA")]
struct Cli {
    /// Log verbosity on stderr (repeat for more). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed or load caption vectors and write an index directory.
    BuildIndex(BuildIndexArgs),
    /// Top-k captions for every frame of a video, as JSONL.
    Retrieve(RetrieveArgs),
    /// Answer one question about one video.
    Answer(AnswerArgs),
    /// Exact-match evaluation over a QA dataset.
    Eval(EvalArgs),
    /// Per-query retrieval latency and throughput.
    Bench(BenchArgs),
    /// Write the built-in synthetic dataset (captions, index, frames, QA).
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    /// Captions, one per line; blank lines are skipped.
    #[arg(long)]
    texts: PathBuf,
    /// Precomputed caption vectors (R2AV file), one row per caption.
    #[arg(long, conflicts_with = "embed_with", required_unless_present = "embed_with")]
    embeddings: Option<PathBuf>,
    /// Embed captions with a backend: `mock` or `http:URL`.
    #[arg(long, env = "R2A_EMBED_WITH")]
    embed_with: Option<String>,
    /// Width of mock embeddings.
    #[arg(long, default_value_t = 64, env = "R2A_DIM", value_parser = positive)]
    dim: usize,
    /// Output index directory.
    #[arg(long)]
    out: PathBuf,
    /// Shard count to report (0 = one per worker thread).
    #[arg(long, default_value_t = 0, env = "R2A_SHARDS")]
    shards: usize,
}

/// Where a video's frame features come from.
#[derive(Args, Debug)]
struct FrameInput {
    /// Frame features of one video (R2AV file, one row per frame).
    #[arg(long, required_unless_present = "video_id")]
    frames: Option<PathBuf>,
    /// Embed frames through a backend instead of reading `--frames`.
    #[arg(long, conflicts_with = "frames", requires = "embed_frames")]
    video_id: Option<String>,
    /// Backend for `--video-id`: `mock` or `http:URL`.
    #[arg(long, env = "R2A_EMBED_WITH")]
    embed_frames: Option<String>,
    /// Video file passed to the backend with `--video-id`.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Frames sampled per video with `--video-id`.
    #[arg(long, default_value_t = 10, env = "R2A_NUM_FRAMES", value_parser = positive)]
    num_frames: usize,
}

#[derive(Args, Debug)]
struct RetrievalOpts {
    /// Index directory written by `build-index`.
    #[arg(long, env = "R2A_INDEX")]
    index: PathBuf,
    /// Captions retrieved per frame.
    #[arg(short, long, default_value_t = 10, env = "R2A_K", value_parser = positive)]
    k: usize,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0, env = "R2A_THREADS")]
    threads: usize,
    /// Corpus shards scanned independently (0 = one per worker thread).
    #[arg(long, default_value_t = 0, env = "R2A_SHARDS")]
    shards: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Jsonl,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    retrieval: RetrievalOpts,
    #[command(flatten)]
    input: FrameInput,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
struct AnswerOpts {
    /// Candidate answers, one per line.
    #[arg(long, env = "R2A_CANDIDATES")]
    candidates: PathBuf,
    /// `mock`, `overlap`, or `http:URL`.
    #[arg(long, default_value = "mock", env = "R2A_SCORER")]
    scorer: String,
    /// Word introducing the hint captions.
    #[arg(long, default_value = "Hints:", env = "R2A_PROMPT_WORD")]
    prompt_word: String,
    /// Maximum prompt length in scorer tokens.
    #[arg(long, default_value_t = 500, env = "R2A_TOKEN_BUDGET", value_parser = token_budget)]
    token_budget: usize,
    /// How multi-token answers combine their per-slot log-probabilities.
    #[arg(long, value_enum, default_value_t = AggregationArg::Mean, env = "R2A_AGGREGATION")]
    aggregation: AggregationArg,
}

#[derive(Args, Debug)]
struct AnswerArgs {
    #[command(flatten)]
    retrieval: RetrievalOpts,
    #[command(flatten)]
    input: FrameInput,
    #[arg(long)]
    question: String,
    #[command(flatten)]
    answer: AnswerOpts,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Retrieval,
    Random,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    retrieval: RetrievalOpts,
    /// QA records as JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// JSONL of {video_id, path, num_frames}.
    #[arg(long)]
    frames_manifest: PathBuf,
    #[command(flatten)]
    answer: AnswerOpts,
    /// Where to write the full report; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Context source: retrieved captions or random corpus captions.
    #[arg(long, value_enum, default_value_t = Baseline::Retrieval)]
    baseline: Baseline,
    /// Seed for `--baseline random`.
    #[arg(long, default_value_t = 0, env = "R2A_SEED")]
    seed: u64,
    /// Compare answers verbatim instead of normalized.
    #[arg(long)]
    strict: bool,
    /// Abort on the first failing record.
    #[arg(long)]
    fail_fast: bool,
    /// Omit per-item results from the report.
    #[arg(long)]
    no_items: bool,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["index", "synthetic"])))]
struct BenchArgs {
    /// Index directory to benchmark.
    #[arg(long, env = "R2A_INDEX")]
    index: Option<PathBuf>,
    /// Random unit-vector index of `ROWSxDIM`, e.g. `1000000x256`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Number of random queries.
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(short, long, default_value_t = 10, env = "R2A_K", value_parser = positive)]
    k: usize,
    /// Worker threads; 1 runs the scan sequentially.
    #[arg(long, default_value_t = 1, env = "R2A_THREADS")]
    threads: usize,
    /// Corpus shards (0 = one per thread).
    #[arg(long, default_value_t = 0, env = "R2A_SHARDS")]
    shards: usize,
    /// Passes over the query set; latency statistics cover all of them.
    #[arg(long, default_value_t = 1, value_parser = positive)]
    repeat: usize,
    #[arg(long, default_value_t = 0, env = "R2A_SEED")]
    seed: u64,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn token_budget(s: &str) -> Result<usize, String> {
    let n = s.parse::<usize>().map_err(|e| e.to_string())?;
    if n < 16 {
        return Err("must be at least 16".into());
    }
    Ok(n)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 1,
        Error::Transport { .. } | Error::Backend { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let result = match cli.command {
        Command::BuildIndex(a) => commands::build_index(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Answer(a) => commands::answer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Fixture(a) => commands::fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
