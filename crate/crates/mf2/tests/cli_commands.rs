use std::path::Path;
use std::process::{Command, Output};

use mf2::record::RunRecord;

fn mf2(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mf2"))
        .args(args)
        .current_dir(dir)
        .env("MF2_RUN_ROOT", dir.join("runs"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mf2(dir, args);
    assert!(
        out.status.success(),
        "mf2 {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mf2(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mf2(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "Usage");
}

#[test]
fn unknown_config_key_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mf2(
        dir.path(),
        &["--set", "train.lrr=1", "data", "fixture", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnknownKey"));
}

#[test]
fn pipeline_runs_and_reruns_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "data", "fixture", "--out", "raw", "--videos", "8", "--frames", "1",
        ],
    );
    ok(
        dir,
        &[
            "data",
            "split",
            "--in",
            "raw/manifest.jsonl",
            "--out",
            "split",
            "--train-fraction",
            "0.75",
        ],
    );
    ok(
        dir,
        &[
            "--run-dir",
            "runs/ann",
            "annotate",
            "--in",
            "split/train.jsonl",
            "--out",
            "captions.jsonl",
        ],
    );
    let train = [
        "--run-dir",
        "runs/train",
        "--set",
        "train.epochs=1",
        "train",
        "--train",
        "split/train.jsonl",
        "--val",
        "split/val.jsonl",
        "--captions",
        "captions.jsonl",
    ];
    ok(dir, &train);
    let first = RunRecord::load(&dir.join("runs/train/record.json")).unwrap();
    assert!(dir.join("runs/train/checkpoint.json").is_file());
    assert!(dir.join("runs/train/log.jsonl").is_file());

    let refused = mf2(dir, &train);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("RunExists"));

    let mut forced = vec!["--force"];
    forced.extend(train);
    ok(dir, &forced);
    let second = RunRecord::load(&dir.join("runs/train/record.json")).unwrap();
    assert_eq!(first.content_hash, second.content_hash);
    assert_eq!(first.input_hash, second.input_hash);

    let report = ok(
        dir,
        &[
            "--run-dir",
            "runs/eval",
            "eval",
            "--checkpoint",
            "runs/train/checkpoint.json",
            "--manifest",
            "split/val.jsonl",
        ],
    );
    assert!(report.contains("AU recognition"));
    let eval = RunRecord::load(&dir.join("runs/eval/record.json")).unwrap();
    assert_eq!(eval.text_encoder_calls, Some(0));
    assert!(eval.metrics.is_some());
}
