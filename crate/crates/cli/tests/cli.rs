use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use r2a_core::answer::{mock_embed, select_answer, Embedder, MockBackend};
use r2a_core::context::{build_answer_prompt, build_context, truncate_to_budget};
use r2a_core::corpus::{load_index, load_vectors, save_vectors, EmbeddingMatrix};
use r2a_core::eval::{evaluate, EvalReport, FrameManifest, Pipeline};
use r2a_core::fixture::{FixtureFiles, MockFixture};
use r2a_core::retrieval::{dedup_captions, retrieve_video, FrameFeatures};
use r2a_core::rng::SplitMix64;

fn r2a(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2a"))
        .args(args)
        .env_remove("R2A_K")
        .env_remove("R2A_SCORER")
        .env_remove("R2A_PROMPT_WORD")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_matrix(seed: u64, n: usize, d: usize) -> EmbeddingMatrix {
    let mut rng = SplitMix64::new(seed);
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..d).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect())
        .collect();
    EmbeddingMatrix::from_rows(&rows, false).unwrap()
}

struct Small {
    _dir: tempfile::TempDir,
    root: PathBuf,
    texts: PathBuf,
    vectors: PathBuf,
}

fn small_corpus() -> Small {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_owned();
    let texts = root.join("captions.txt");
    let lines: Vec<String> = (0..10).map(|i| format!("caption {i} about thing {}", i * 3)).collect();
    fs::write(&texts, lines.join("\n") + "\n").unwrap();
    let vectors = root.join("vectors.r2av");
    save_vectors(&vectors, &random_matrix(5, 10, 8)).unwrap();
    Small {
        _dir: dir,
        root,
        texts,
        vectors,
    }
}

fn build(s: &Small) -> PathBuf {
    let out = s.root.join("index");
    ok(&r2a(&["build-index", "--texts", p(&s.texts), "--embeddings", p(&s.vectors), "--out", p(&out)]));
    out
}

#[test]
fn build_index_from_matching_embeddings() {
    let s = small_corpus();
    let out = s.root.join("index");
    let stdout = ok(&r2a(&[
        "build-index", "--texts", p(&s.texts), "--embeddings", p(&s.vectors), "--out", p(&out), "--shards", "3",
    ]));
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!((v["n"].as_u64(), v["d"].as_u64()), (Some(10), Some(8)));
    assert_eq!(v["shards"].as_array().unwrap().len(), 3);
    let index = load_index(&out).unwrap();
    assert_eq!((index.len(), index.dim()), (10, 8));
    assert_eq!(index.corpus().text(3), Some("caption 3 about thing 9"));
}

#[test]
fn row_count_mismatch_exits_two() {
    let s = small_corpus();
    save_vectors(&s.vectors, &random_matrix(5, 9, 8)).unwrap();
    let out = r2a(&["build-index", "--texts", p(&s.texts), "--embeddings", p(&s.vectors), "--out", p(&s.root.join("i"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row count mismatch"));
}

#[test]
fn missing_input_exits_one() {
    let s = small_corpus();
    let out = r2a(&["build-index", "--texts", p(&s.root.join("nope.txt")), "--embed-with", "mock", "--out", p(&s.root)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn embed_with_mock_stores_mock_vectors() {
    let s = small_corpus();
    let out = s.root.join("index");
    ok(&r2a(&["build-index", "--texts", p(&s.texts), "--embed-with", "mock", "--dim", "16", "--out", p(&out)]));
    let index = load_index(&out).unwrap();
    for e in index.corpus().entries() {
        assert_eq!(index.embeddings().row(e.id), mock_embed(&e.text, 16).as_slice());
    }
}

#[test]
fn retrieve_finds_identical_row() {
    let s = small_corpus();
    let index_dir = build(&s);
    let index = load_index(&index_dir).unwrap();
    let frames = s.root.join("frame.r2av");
    let row5 = index.embeddings().row(5).to_vec();
    save_vectors(&frames, &EmbeddingMatrix::from_rows(&[row5], false).unwrap()).unwrap();
    let stdout = ok(&r2a(&["retrieve", "--index", p(&index_dir), "--frames", p(&frames), "-k", "1"]));
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["frame"], 1);
    assert_eq!(v["hits"][0]["id"], 5);
    assert!((v["hits"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn retrieve_clamps_k_and_matches_library() {
    let s = small_corpus();
    let index_dir = build(&s);
    let frames = s.root.join("frames.r2av");
    save_vectors(&frames, &random_matrix(9, 4, 8)).unwrap();
    let stdout = ok(&r2a(&["retrieve", "--index", p(&index_dir), "--frames", p(&frames), "-k", "50"]));
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["hits"].as_array().unwrap().len() == 10));

    let index = load_index(&index_dir).unwrap();
    let f = FrameFeatures::new("frames", load_vectors(&frames).unwrap()).unwrap();
    let expected = retrieve_video(&index, &f, 50).unwrap().to_jsonl(index.corpus()).unwrap();
    assert_eq!(stdout, expected);
}

#[test]
fn retrieve_dim_mismatch_exits_two() {
    let s = small_corpus();
    let index_dir = build(&s);
    let frames = s.root.join("frames.r2av");
    save_vectors(&frames, &random_matrix(9, 2, 5)).unwrap();
    let out = r2a(&["retrieve", "--index", p(&index_dir), "--frames", p(&frames)]);
    assert_eq!(out.status.code(), Some(2));
}

fn fixture_files() -> (tempfile::TempDir, FixtureFiles, MockFixture) {
    let dir = tempfile::tempdir().unwrap();
    let f = MockFixture::generate().unwrap();
    let files = f.write(dir.path()).unwrap();
    (dir, files, f)
}

fn answer_json(stdout: &str) -> (String, Value) {
    let mut lines = stdout.lines();
    let answer = lines.next().unwrap().to_owned();
    (answer, serde_json::from_str(lines.next().unwrap()).unwrap())
}

#[test]
fn answer_with_singleton_candidate() {
    let (dir, files, _) = fixture_files();
    let single = dir.path().join("one.txt");
    fs::write(&single, "car\n").unwrap();
    let frames = dir.path().join("frames/video05.r2av");
    let stdout = ok(&r2a(&[
        "answer", "--index", p(&files.index_dir), "--frames", p(&frames), "--question", "what is it?",
        "--candidates", p(&single),
    ]));
    let (answer, v) = answer_json(&stdout);
    assert_eq!(answer, "car");
    assert_eq!(v["scores"].as_array().unwrap().len(), 1);
}

#[test]
fn answer_matches_library_and_honours_prompt_word() {
    let (dir, files, f) = fixture_files();
    let frames = dir.path().join("frames/video02.r2av");
    let question = "what vehicle is shown?";
    let stdout = ok(&r2a(&[
        "answer", "--index", p(&files.index_dir), "--frames", p(&frames), "--question", question,
        "--candidates", p(&files.candidates), "-k", "3", "--prompt-word", "Contexts:",
    ]));
    let (answer, v) = answer_json(&stdout);
    assert!(v["prompt"].as_str().unwrap().contains("Answer: [MASK]. Contexts: Firstly,"));

    let video = &f.frames["video02"];
    let r = retrieve_video(&f.index, video, 3).unwrap();
    let ctx = build_context(&dedup_captions(&r, f.index.corpus()), video.num_frames()).unwrap();
    let prompt = build_answer_prompt(question, ctx, "Contexts:", 1).unwrap();
    let prompt = truncate_to_budget(&prompt, 500, |s| Ok(s.split_whitespace().count())).unwrap();
    let lib = select_answer(&prompt, &f.candidates, &MockBackend::default()).unwrap();
    assert_eq!(answer, lib.answer);
    assert_eq!(v["log_prob"].as_f64().unwrap(), lib.log_prob);
    assert_eq!(v["prompt"].as_str().unwrap(), prompt.render_with("[MASK]"));
}

#[test]
fn unreachable_scorer_exits_three() {
    let (dir, files, _) = fixture_files();
    let frames = dir.path().join("frames/video02.r2av");
    let out = r2a(&[
        "answer", "--index", p(&files.index_dir), "--frames", p(&frames), "--question", "q",
        "--candidates", p(&files.candidates), "--scorer", "http:http://127.0.0.1:9",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn eval_args<'a>(files: &'a FixtureFiles, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "eval", "--index", p(&files.index_dir), "--dataset", p(&files.dataset), "--frames-manifest",
        p(&files.manifest), "--candidates", p(&files.candidates), "-k", "3",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn eval_report_matches_library() {
    let (dir, files, f) = fixture_files();
    let report_path = dir.path().join("report.json");
    let stdout = ok(&r2a(&eval_args(&files, &["--report", p(&report_path)])));
    let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();

    let manifest = FrameManifest::load(&files.manifest).unwrap();
    let pipeline = Pipeline {
        index: &f.index,
        frames: &manifest,
        candidates: &f.candidates,
        scorer: &MockBackend::default(),
        config: MockFixture::eval_config(),
    };
    let lib = evaluate(&f.records, &pipeline).unwrap();
    assert_eq!(report, lib);
    assert_eq!(summary["accuracy"].as_f64(), lib.accuracy);
    assert_eq!(summary["total"], 20);
}

#[test]
fn eval_overlap_scorer_reaches_ceiling() {
    let (_dir, files, _) = fixture_files();
    let stdout = ok(&r2a(&eval_args(&files, &["--scorer", "overlap"])));
    let report: EvalReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report.accuracy, Some(1.0));
}

#[test]
fn random_baseline_is_deterministic() {
    let (_dir, files, _) = fixture_files();
    let a = ok(&r2a(&eval_args(&files, &["--baseline", "random", "--seed", "9", "--scorer", "overlap"])));
    let b = ok(&r2a(&eval_args(&files, &["--baseline", "random", "--seed", "9", "--scorer", "overlap"])));
    assert_eq!(a, b);
    let retrieval: EvalReport = serde_json::from_str(&ok(&r2a(&eval_args(&files, &["--scorer", "overlap"])))).unwrap();
    let random: EvalReport = serde_json::from_str(&a).unwrap();
    assert!(retrieval.accuracy >= random.accuracy);
}

#[test]
fn environment_supplies_defaults_and_flags_win() {
    let (dir, files, _) = fixture_files();
    let frames = dir.path().join("frames/video00.r2av");
    let run = |extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_r2a"));
        cmd.args(["retrieve", "--index", p(&files.index_dir), "--frames", p(&frames)])
            .args(extra)
            .env("R2A_K", "2");
        let out = ok(&cmd.output().unwrap());
        let first: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
        first["hits"].as_array().unwrap().len()
    };
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["-k", "4"]), 4);
}

#[test]
fn bench_zero_queries_exits_immediately() {
    let stdout = ok(&r2a(&["bench", "--synthetic", "10x4", "--queries", "0"]));
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["queries"], 0);
    assert!(v["median_ms"].is_null());
}

#[test]
fn bench_results_do_not_depend_on_threads() {
    let run = |threads: &str| -> Value {
        let out = ok(&r2a(&["bench", "--synthetic", "5000x32", "--queries", "20", "--threads", threads, "--seed", "3"]));
        serde_json::from_str(out.trim()).unwrap()
    };
    let one = run("1");
    let four = run("4");
    assert_eq!(one["digest"], four["digest"]);
    assert_eq!(four["shards"], 4);
    for field in ["median_ms", "p99_ms", "qps"] {
        assert!(one[field].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn bench_on_saved_index() {
    let s = small_corpus();
    let index_dir = build(&s);
    let out = ok(&r2a(&["bench", "--index", p(&index_dir), "--queries", "5", "-k", "3", "--repeat", "2"]));
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!((v["rows"].as_u64(), v["dim"].as_u64()), (Some(10), Some(8)));
}

#[test]
fn mock_frame_embedding_without_vector_file() {
    let s = small_corpus();
    let out = s.root.join("index");
    ok(&r2a(&["build-index", "--texts", p(&s.texts), "--embed-with", "mock", "--dim", "12", "--out", p(&out)]));
    let stdout = ok(&r2a(&[
        "retrieve", "--index", p(&out), "--video-id", "clip7", "--embed-frames", "mock", "--num-frames", "3", "-k", "2",
    ]));
    let index = load_index(&out).unwrap();
    let f = MockBackend::new(12);
    let frames = Embedder::embed_frames(&f, "clip7", Path::new(""), 3).unwrap();
    assert_eq!(stdout, retrieve_video(&index, &frames, 2).unwrap().to_jsonl(index.corpus()).unwrap());
}

#[test]
fn invalid_settings_are_rejected() {
    let out = r2a(&["bench", "--synthetic", "10x4", "-k", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = r2a(&["bench", "--synthetic", "ten"]);
    assert_eq!(out.status.code(), Some(2));
    let (_dir, files, _) = fixture_files();
    let out = r2a(&eval_args(&files, &["--token-budget", "8"]));
    assert_eq!(out.status.code(), Some(2));
    let out = r2a(&eval_args(&files, &["--scorer", "oracle"]));
    assert_eq!(out.status.code(), Some(2));
}
