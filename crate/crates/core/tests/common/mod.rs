#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kws_core::cli::run_from;

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI in-process.
pub fn kws(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("kws").chain(args.iter().copied());
    let code = run_from(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn kws_ok(args: &[&str]) -> String {
    let o = kws(args);
    assert_eq!(o.code, 0, "kws {args:?} failed: {}", o.stderr);
    o.stdout
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Training corpus (6 keywords x 12, every 10th hypothesis corrupted) and a
/// user-defined corpus (3 keywords x 12) under `root`.
pub struct ToyCorpus {
    pub train_dir: PathBuf,
    pub user_dir: PathBuf,
}

pub fn toy_corpus(root: &Path) -> ToyCorpus {
    let train_dir = root.join("train");
    let user_dir = root.join("user");
    kws_ok(&[
        "synth", "--out", p(&train_dir),
        "--keywords", "apple,banana,cherry,delta,echo,foxtrot",
        "--per-keyword", "12", "--corrupt-every", "10",
    ]);
    kws_ok(&[
        "synth", "--out", p(&user_dir),
        "--keywords", "zero,one,two",
        "--per-keyword", "12", "--seed", "100",
    ]);
    ToyCorpus { train_dir, user_dir }
}

pub struct PipelineOutputs {
    pub filtered: PathBuf,
    pub checkpoint: PathBuf,
    pub store: PathBuf,
    pub report: PathBuf,
    pub det: PathBuf,
    pub enroll_stdout: String,
}

/// build-dataset -> train (pretrain, AP) -> enroll -> evaluate, writing into `out`.
pub fn pipeline(corpus: &ToyCorpus, out: &Path, seed: &str) -> PipelineOutputs {
    std::fs::create_dir_all(out).unwrap();
    let filtered = out.join("filtered.jsonl");
    let checkpoint = out.join("model.ckpt");
    let store = out.join("store.bin");
    let report = out.join("report.json");
    let det = out.join("det.csv");
    let manifest = corpus.train_dir.join("manifest.jsonl");
    let user = corpus.user_dir.join("manifest.jsonl");
    kws_ok(&[
        "build-dataset", "--manifest", p(&manifest), "--out", p(&filtered),
        "--drop-top-frequent", "0", "--seed", seed,
    ]);
    kws_ok(&[
        "train", "--stage", "pretrain", "--loss", "ap",
        "--manifest", p(&filtered), "--audio-root", p(&corpus.train_dir),
        "--out", p(&checkpoint), "--epochs", "8", "--batch-size", "24",
        "--hidden", "32", "--embedding-dim", "16", "--seed", seed,
    ]);
    let enroll_stdout = kws_ok(&[
        "enroll", "--checkpoint", p(&checkpoint), "--manifest", p(&user),
        "--shots", "5", "--out", p(&store), "--seed", seed,
    ]);
    kws_ok(&[
        "evaluate", "--checkpoint", p(&checkpoint), "--store", p(&store),
        "--manifest", p(&user), "--skip-first", "5",
        "--report", p(&report), "--det", p(&det), "--seed", seed,
    ]);
    PipelineOutputs { filtered, checkpoint, store, report, det, enroll_stdout }
}
