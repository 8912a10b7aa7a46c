use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sparse_tune::param::{serialize_diff, Layout, Metadata, SparseDiff};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 1
[model]
hidden_size = 16
layers = 1
heads = 2
ffn_size = 16
[data]
pretrain_sentences = 40
low_resource_sentences = 10
language_sentences = 40
task_examples = 40
eval_examples = 20
multi_source_cap = 20
[pretrain]
steps = 20
batch_size = 8
[language]
phase1_steps = 5
phase2_steps = 5
batch_size = 8
[task]
phase1_steps = 5
phase2_steps = 5
batch_size = 8
[sweep]
levels = [0.5, 1.0]
seeds = [0, 1]
language_steps = 3
"#;

/// Every command once, with paths relative to the working directory.
const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["pretrain"],
    &["train-lang", "--lang", "src0"],
    &["train-lang", "--lang", "src1"],
    &["train-lang", "--lang", "tgt0"],
    &[
        "train-lang",
        "--lang",
        "tgt0",
        "--strategy",
        "rand",
        "--budget-k",
        "2%",
    ],
    &["train-lang", "--lang", "tgt0", "--strategy", "bitfit"],
    &[
        "train-task",
        "--lang",
        "src0",
        "--source-sft",
        "run/langs/src0.sft",
    ],
    &[
        "train-task",
        "--source-sft",
        "run/langs/src0.sft",
        "--source-sft",
        "run/langs/src1.sft",
        "--lambda",
        "0.01",
    ],
    &[
        "compose",
        "--task-sft",
        "run/tasks/tagging-src0.sft",
        "--target-sft",
        "run/langs/tgt0.sft",
    ],
    &[
        "compose",
        "--task-sft",
        "run/tasks/tagging-src0.sft",
        "--ta-only",
    ],
    &[
        "eval",
        "--lang",
        "tgt0",
        "--composed",
        "run/composed/tagging-src0+tgt0.ckpt",
    ],
    &[
        "eval",
        "--lang",
        "tgt0",
        "--task-sft",
        "run/tasks/tagging-src0.sft",
        "--target-sft",
        "run/langs/tgt0.sft",
    ],
    &[
        "eval",
        "--lang",
        "tgt0",
        "--task-sft",
        "run/tasks/tagging-src0.sft",
        "--ta-only",
    ],
    &[
        "eval",
        "--lang",
        "tgt0",
        "--task-sft",
        "run/tasks/tagging-src0+src1.sft",
        "--target-sft",
        "run/langs/tgt0.sft",
    ],
    &[
        "overlap",
        "run/langs/src0.sft",
        "run/langs/src1.sft",
        "run/langs/tgt0.sft",
    ],
    &["sweep-density"],
    &["inspect-sft", "run/langs/tgt0.sft"],
];

fn sparse_tune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-tune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sparse-tune")
}

/// Runs with the tiny configuration and `--out-dir run`.
fn run_tiny(dir: &Path, args: &[&str]) -> Output {
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--config", "tiny.toml", "--out-dir", "run"]);
    sparse_tune(dir, &full)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn pipeline_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for args in PIPELINE {
        let out = run_tiny(dir.path(), args);
        assert!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    dir
}

/// Two independent runs of the same pipeline.
fn pipelines() -> &'static (TempDir, TempDir) {
    static RUNS: OnceLock<(TempDir, TempDir)> = OnceLock::new();
    RUNS.get_or_init(|| (pipeline_dir(), pipeline_dir()))
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn without_wall_clock(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn reruns_reproduce_every_file() {
    let (a, b) = pipelines();
    let fa = files(&a.path().join("run"));
    let fb = files(&b.path().join("run"));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    assert!(fa.keys().any(|k| k.starts_with("manifests")));
    for (path, bytes) in &fa {
        if path.starts_with("manifests") {
            assert_eq!(
                without_wall_clock(bytes),
                without_wall_clock(&fb[path]),
                "{}",
                path.display()
            );
        } else {
            assert!(bytes == &fb[path], "{} differs", path.display());
        }
    }
}

#[test]
fn manifests_hash_inputs_and_outputs() {
    let (a, _) = pipelines();
    let text = std::fs::read(
        a.path()
            .join("run/manifests/eval-ckpt-tagging-src0+tgt0-tgt0.json"),
    )
    .unwrap();
    let m: serde_json::Value = serde_json::from_slice(&text).unwrap();
    assert_eq!(m["command"], "eval");
    assert!(
        m["inputs"]["composed/tagging-src0+tgt0.ckpt"]
            .as_str()
            .unwrap()
            .len()
            == 64
    );
    assert!(m["outputs"]["metrics/eval-ckpt-tagging-src0+tgt0-tgt0.tsv"].is_string());
    assert!(m["metrics"]["accuracy"].as_f64().is_some());
}

#[test]
fn composed_checkpoint_scores_like_on_the_fly_composition() {
    let (a, _) = pipelines();
    let value = |name: &str| {
        let text = std::fs::read_to_string(a.path().join("run/metrics").join(name)).unwrap();
        text.trim().rsplit('\t').next().unwrap().to_string()
    };
    assert_eq!(
        value("eval-ckpt-tagging-src0+tgt0-tgt0.tsv"),
        value("eval-tagging-src0+tgt0-tgt0.tsv")
    );
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = sparse_tune(dir.path(), &["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
    let out = sparse_tune(dir.path(), &["compose", "--task-sft", "x.sft"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_have_their_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let out = sparse_tune(dir.path(), &["inspect-sft", "absent.sft"]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "missing-file");
    assert_eq!(err["code"], 3);
    let out = sparse_tune(dir.path(), &["pretrain", "--out-dir", "run"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn foreign_artifacts_are_fingerprint_errors() {
    let (a, _) = pipelines();
    let other = TempDir::new().unwrap();
    std::fs::write(
        other.path().join("tiny.toml"),
        TINY.replace("hidden_size = 16", "hidden_size = 8")
            .replace("steps = 20", "steps = 2"),
    )
    .unwrap();
    for args in [&["gen-data"][..], &["pretrain"]] {
        assert!(run_tiny(other.path(), args).status.success());
    }
    let foreign = a.path().join("run/composed/tagging-src0+tgt0.ckpt");
    let out = run_tiny(
        other.path(),
        &[
            "eval",
            "--lang",
            "tgt0",
            "--composed",
            foreign.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "fingerprint-mismatch");
    let foreign = a.path().join("run/langs/src0.sft");
    let out = run_tiny(
        other.path(),
        &[
            "train-task",
            "--lang",
            "src0",
            "--source-sft",
            foreign.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn corrupted_artifacts_are_rejected() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.sft"), b"SFT1 not really").unwrap();
    let out = sparse_tune(dir.path(), &["inspect-sft", "bad.sft"]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_line(&out)["error"], "invalid-input");
}

#[test]
fn inspecting_an_empty_diff() {
    let dir = TempDir::new().unwrap();
    let layout = Layout::new(vec![("w".into(), vec![4, 3]), ("b".into(), vec![3])]).unwrap();
    let bytes = serialize_diff(&SparseDiff::empty(layout), &Metadata::new());
    std::fs::write(dir.path().join("empty.sft"), bytes).unwrap();
    let out = sparse_tune(
        dir.path(),
        &["inspect-sft", "empty.sft", "--out-dir", "run"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["entries"], 0);
    assert_eq!(v["density"], 0.0);
    assert_eq!(v["total_params"], 15);
}

#[test]
fn bad_configuration_is_invalid_input() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "[model]\nhidden_size = 10\nheads = 3\n",
    )
    .unwrap();
    let out = sparse_tune(
        dir.path(),
        &["pretrain", "--config", "c.toml", "--out-dir", "run"],
    );
    assert_eq!(
        out.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    std::fs::write(dir.path().join("d.toml"), "typo = 1\n").unwrap();
    let out = sparse_tune(dir.path(), &["gen-data", "--config", "d.toml"]);
    assert_eq!(out.status.code(), Some(5));
}
