//! End-to-end runs of the `ctxagg` binary on a small synthetic config.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "data.synthetic.n_users=60",
    "--set",
    "data.synthetic.events_per_user=80",
    "--set",
    "pretrain.epochs=2",
    "--set",
    "aggregator_training.epochs=2",
    "--set",
    "local.epochs=20",
];

fn ctxagg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxagg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = ctxagg(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_command_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ctxagg(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_local_without_pretrain_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    let o = ctxagg(dir.path(), &["eval-local"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing encoder checkpoint"));
}

#[test]
fn bad_override_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxagg(dir.path(), &["synth", "--set", "local.epochz=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("local.epochz"));

    let o = ctxagg(dir.path(), &["synth", "--set", "seeds=[]"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = ctxagg(dir.path(), &["synth", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_metrics_for_every_seed_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["synth", "pretrain", "embed", "train-agg", "eval-global", "eval-local"] {
        ok(out, &[cmd]);
    }
    for f in ["events.jsonl", "labels.csv", "config_hash.txt", "metrics.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    for seed in 0..3 {
        for f in ["encoder.bin", "index.bin", "agg-KernelAttention.bin"] {
            assert!(out.join(format!("seed-{seed}")).join(f).exists(), "seed {seed} {f}");
        }
    }

    let mut reader = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let mut per_method: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        per_method
            .entry(rec[0].to_string())
            .or_default()
            .push((rec[1].to_string(), rec[2].parse().unwrap()));
    }
    assert_eq!(
        per_method.keys().map(String::as_str).collect::<Vec<_>>(),
        vec!["KernelAttention", "Mean", "NoContext"]
    );
    for (method, rows) in &per_method {
        assert_eq!(rows.len(), 6, "{method}");
        for task in ["global", "local"] {
            let seeds: Vec<u64> = rows.iter().filter(|(t, _)| t == task).map(|(_, s)| *s).collect();
            assert_eq!(seeds, vec![0, 1, 2], "{method} {task}");
        }
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(manifest["modules"].as_object().unwrap().len(), 7);
    assert!(manifest["commands"]["eval-local"]["artifacts"].is_array());
}

#[test]
fn seed_flag_replaces_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["synth", "--seed", "7"]);
    ok(out, &["pretrain", "--seed", "7"]);
    assert!(out.join("seed-7/encoder.bin").exists());
    assert!(!out.join("seed-0").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
}
