//! End-to-end tests of the `tdvcl` binary: exit codes, emitted artifacts,
//! and the bundled configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tdvcl")
}

fn run_args(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn smoke_synthetic_run_emits_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    let output = run_args(&[
        "run",
        repo_config("smoke_synthetic.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    for file in ["runs.csv", "aggregate.json", "avg_accuracy.svg", "per_task_accuracy.svg", "config.resolved.json", "train_log_seed0.jsonl"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
}

#[test]
fn missing_method_field_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    let text = std::fs::read_to_string(repo_config("smoke_synthetic.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["method"] = serde_json::json!({"kind": "td_lambda", "n": 4, "beta": 1e-3});
    std::fs::write(&config, serde_json::to_string(&value).unwrap()).unwrap();
    let output = run_args(&["run", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("method.lambda"), "stderr: {stderr}");
}

#[test]
fn unreadable_config_exits_2() {
    let output = run_args(&["run", "/nonexistent/config.json"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn check_coefficients_passes() {
    let output = run_args(&["check", "coefficients"]);
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    // machine-readable: every line parses as JSON
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("json line");
        assert!(v.get("passed").is_some() || v.get("suite").is_some());
    }
    assert!(stdout.contains("\"passed\":true"));
}

#[test]
fn check_unknown_suite_exits_2() {
    let output = run_args(&["check", "nonsense"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn usage_error_exits_2() {
    let output = run_args(&["frobnicate"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn bundled_configs_validate() {
    // the permuted configs carry the reported defaults: n-step n=5 beta=5e-3,
    // td(lambda) n=8 lambda=0.5 beta=1e-3, batch 256, lr 1e-3, prior var 1e-5
    for name in [
        "smoke_synthetic.json",
        "permuted_reduced_tdvcl.json",
        "permuted_reduced_nstep.json",
        "oracle_demo.json",
    ] {
        let text = std::fs::read_to_string(repo_config(name)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.get("benchmark").is_some(), "{name} lacks benchmark");
    }
    let td: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(repo_config("permuted_reduced_tdvcl.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(td["method"]["n"], 8);
    assert_eq!(td["method"]["lambda"], 0.5);
    assert_eq!(td["method"]["beta"], 0.001);
    assert_eq!(td["train"]["batch_size"], 256);
    assert_eq!(td["train"]["learning_rate"], 0.001);
    assert_eq!(td["prior_variance"], 1e-5);
}

#[test]
fn oracle_benchmark_writes_kl_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle");
    let output = run_args(&[
        "run",
        repo_config("oracle_demo.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed-override",
        "3",
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(out.join("kl_trajectories.csv")).unwrap();
    assert!(csv.starts_with("run_id,seed,method,t,task,accuracy"));
    assert!(csv.lines().count() > 1);
}
