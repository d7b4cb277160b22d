use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn dualmode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmode"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small but learnable experiment, written into `dir`.
fn write_config(dir: &Path, name: &str, patch: Value) -> PathBuf {
    let mut cfg = json!({
        "seed": 4,
        "model": {
            "encoder": {"architecture": "contextnet_lite", "blocks": 1, "channels": 16, "kernel_size": 5,
                        "heads": 2, "stride": 2, "feature_dim": 8},
            "vocab_size": 5, "embed_dim": 8, "prediction_hidden": 16, "joint_dim": 16
        },
        "train": {"steps": 400, "batch_size": 4, "learning_rate": 0.005, "warmup_steps": 10, "log_every": 50},
        "task": {"vocab_size": 5, "segment_frames": 4, "noise": 0.1, "min_tokens": 2, "max_tokens": 4,
                 "trailing_silence": 6, "feature_dim": 8, "seed": 3},
        "data": {"train_utterances": 120, "eval_utterances": 20}
    });
    merge(&mut cfg, patch);
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn metrics(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the default small experiment once and returns (tempdir, checkpoint path).
fn trained() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", json!({}));
    let out = dir.path().join("run");
    let r = dualmode(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    (dir, out.join("final.dmck"))
}

fn evaluate(args: &[&str]) -> Value {
    let r = dualmode(&[&["evaluate"], args].concat());
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    serde_json::from_slice(&r.stdout).unwrap()
}

#[test]
fn gen_data_writes_manifest_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", json!({}));
    let data = dir.path().join("data");
    let r = dualmode(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "7"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    assert_eq!(fs::read_dir(data.join("features")).unwrap().count(), 7);

    let again = dir.path().join("again");
    dualmode(&["gen-data", "--config", s(&cfg), "--out", s(&again), "--count", "7"]);
    assert_eq!(fs::read_to_string(again.join("manifest.jsonl")).unwrap(), manifest);

    let other = dir.path().join("other");
    dualmode(&["gen-data", "--config", s(&cfg), "--out", s(&other), "--count", "7", "--seed-override", "99"]);
    assert_ne!(fs::read_to_string(other.join("manifest.jsonl")).unwrap(), manifest);
}

#[test]
fn gen_data_with_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", json!({}));
    let data = dir.path().join("empty");
    let r = dualmode(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "0"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(fs::read_to_string(data.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn missing_config_is_a_runtime_error_naming_the_path() {
    let r = dualmode(&["train", "--config", "/nonexistent/exp.json", "--out", "/tmp/x"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("/nonexistent/exp.json"), "{}", stderr(&r));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", json!({"train": {"w_distill": -1.0}}));
    let r = dualmode(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("w_distill"), "{}", stderr(&r));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&dualmode(&[])), 1);
    assert_eq!(code(&dualmode(&["transmogrify"])), 1);
    assert_eq!(code(&dualmode(&["train"])), 1);
    assert_eq!(code(&dualmode(&["evaluate", "--checkpoint", "x", "--mode", "sideways"])), 1);
    assert_eq!(code(&dualmode(&["--help"])), 0);
}

#[test]
fn train_without_output_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", json!({}));
    let r = dualmode(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&r), 1, "{}", stderr(&r));
}

#[test]
fn joint_training_logs_all_loss_columns_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", json!({"train": {"steps": 20, "log_every": 5}}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = dualmode(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    let rows = metrics(&a);
    assert_eq!(rows.len(), 4);
    for row in &rows {
        for key in ["loss_full", "loss_stream", "loss_distill", "lr"] {
            assert!(row[key].is_number(), "{key} missing in {row}");
        }
    }
    assert_eq!(rows[0]["step"], 5);
    assert_eq!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(b.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(fs::read(a.join("final.dmck")).unwrap(), fs::read(b.join("final.dmck")).unwrap());
}

#[test]
fn sampled_training_has_no_distillation_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.json",
        json!({"train": {"steps": 12, "log_every": 1, "mode_strategy": "sampled"}}),
    );
    let out = dir.path().join("o");
    let r = dualmode(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for row in metrics(&out) {
        assert!(row["loss_distill"].is_null());
        assert!(row["loss_full"].is_null() != row["loss_stream"].is_null(), "{row}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", json!({"train": {"steps": 5, "log_every": 5}}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    dualmode(&["train", "--config", s(&cfg), "--out", s(&a)]);
    dualmode(&["train", "--config", s(&cfg), "--out", s(&b), "--seed-override", "11"]);
    assert_ne!(metrics(&a), metrics(&b));
}

#[test]
fn evaluate_reports_and_lookahead_shift() {
    let (dir, ck) = trained();
    let stream = evaluate(&["--checkpoint", s(&ck)]);
    assert_eq!(stream.as_object().unwrap().len(), 7);
    assert!(stream["wer"].as_f64().unwrap() < 30.0, "{stream}");
    let lat = &stream["latency_ms"];
    assert!(lat["p50"].as_f64().unwrap() <= lat["p90"].as_f64().unwrap());

    let full = evaluate(&["--checkpoint", s(&ck), "--mode", "fullcontext"]);
    assert!(full["latency_ms"].is_null());
    assert!(full["wer"].is_number());

    let shifted = evaluate(&["--checkpoint", s(&ck), "--lookahead-frames", "6"]);
    assert_eq!(shifted["wer"], stream["wer"]);
    for q in ["p50", "p90"] {
        let d = shifted["latency_ms"][q].as_f64().unwrap() - lat[q].as_f64().unwrap();
        assert_eq!(d, 60.0, "{q}");
    }

    // explicit dataset on disk, report to a file
    let cfg = write_config(dir.path(), "exp.json", json!({}));
    let data = dir.path().join("data");
    dualmode(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "5"]);
    let report = dir.path().join("report.json");
    let r = dualmode(&["evaluate", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["n"], 5);
}

#[test]
fn streaming_only_checkpoint_rejects_fullcontext() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "so.json",
        json!({"model": {"encoder": {"variant": "streaming_only"}},
               "train": {"steps": 2, "mode_strategy": "sampled", "streaming_prob": 1.0}}),
    );
    let out = dir.path().join("o");
    let r = dualmode(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let ck = out.join("final.dmck");
    let r = dualmode(&["evaluate", "--checkpoint", s(&ck), "--mode", "fullcontext"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("fullcontext"), "{}", stderr(&r));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("junk.dmck");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let r = dualmode(&["evaluate", "--checkpoint", s(&ck)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("junk.dmck"));
}

#[test]
fn export_lattice_files_and_unknown_ids() {
    let (dir, ck) = trained();
    let svg = dir.path().join("lat.svg");
    let r = dualmode(&["export-lattice", "--checkpoint", s(&ck), "--utterance-id", "utt00121", "--out", s(&svg)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let csv = fs::read_to_string(dir.path().join("lat.csv")).unwrap();
    assert!(csv.starts_with("u,token_id,source_frame"));
    assert!(csv.lines().count() > 1);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let only_csv = dir.path().join("only.csv");
    let r = dualmode(&["export-lattice", "--checkpoint", s(&ck), "--utterance-id", "utt00121", "--out", s(&only_csv)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(!dir.path().join("only.svg").exists());

    let r = dualmode(&["export-lattice", "--checkpoint", s(&ck), "--utterance-id", "nope-42", "--out", s(&svg)]);
    assert_ne!(code(&r), 0);
    assert!(stderr(&r).contains("nope-42"), "{}", stderr(&r));
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.json",
        json!({"train": {"steps": 3}, "data": {"train_utterances": 8, "eval_utterances": 4}}),
    );
    let out = dir.path().join("abl");
    let r = dualmode(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(
        labels,
        ["shared+joint+distill", "shared+joint", "shared+sampled", "separate+joint+distill"]
    );
    assert!(rows.iter().all(|r| r["seed"] == 4));
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert_eq!(String::from_utf8(r.stdout).unwrap(), table);
}
