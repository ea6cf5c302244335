//! End-to-end CLI checks driven through the compiled binary.

use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsa-lab"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .args(["--output-dir", dir.to_str().unwrap()])
        .output()
        .expect("binary runs")
}

fn canonical(path: &Path) -> String {
    let doc: Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).expect("valid json");
    serde_json::to_string(&doc["canonical"]).unwrap()
}

#[test]
fn eta_json_matches_closed_form_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["eta", "--d", "5", "--n", "20", "--sigma", "0", "--samples", "200000", "--seed", "7"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let doc: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("eta-7.json")).unwrap(),
    )
    .unwrap();
    let result = &doc["canonical"]["result"];
    let value = result["value"].as_f64().unwrap();
    let stderr = result["stderr"].as_f64().unwrap();
    assert!((value - 1.0 / 26.0).abs() < 3.0 * stderr, "eta {value} vs 1/26");

    // stdout carries the same digits as the JSON file
    let stdout = String::from_utf8_lossy(&out.stdout);
    let value_str = serde_json::to_string(&value).unwrap();
    assert!(stdout.contains(&value_str), "stdout missing {value_str}: {stdout}");

    // resolved config is embedded
    assert_eq!(doc["canonical"]["config"]["task"]["d"].as_u64(), Some(5));
    assert_eq!(doc["canonical"]["config"]["samples"].as_u64(), Some(200_000));
    assert!(doc["canonical"]["artifact_version"].is_string());
    assert!(doc["sidecar"]["wall_time_seconds"].is_number());
}

#[test]
fn eta_reruns_are_canonically_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let args = ["eta", "--d", "2", "--n", "4", "--sigma", "0.5", "--samples", "20000", "--seed", "9"];
    assert!(run(&args, dir_a.path()).status.success());
    assert!(run(&args, dir_b.path()).status.success());
    assert_eq!(
        canonical(&dir_a.path().join("eta-9.json")),
        canonical(&dir_b.path().join("eta-9.json"))
    );
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3, "task": {"d": 3, "n": 6, "sigma": 0.25}}"#).unwrap();

    // file only: d = 3
    let out = run(
        &["eta", "--samples", "2000", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("eta-3.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(doc["canonical"]["config"]["task"]["d"].as_u64(), Some(3));

    // flag overrides file: d = 5
    let out = run(
        &["eta", "--samples", "2000", "--config", cfg.to_str().unwrap(), "--d", "5"],
        dir.path(),
    );
    assert!(out.status.success());
    let doc: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("eta-3.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(doc["canonical"]["config"]["task"]["d"].as_u64(), Some(5));
}

#[test]
fn invalid_dimension_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eta", "--d", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--d"), "stderr should name the flag: {err}");
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"task": {"dd": 4}}"#).unwrap();
    let out = run(&["eta", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dd"), "stderr should name the unknown key: {err}");
}

#[test]
fn unknown_suite_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--suite", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn lemmas_rejects_non_lemma_suites() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["lemmas", "--suite", "train-isotropic"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no results found"));
}

#[test]
fn gen_writes_loadable_batches() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["gen", "--task", "isotropic", "--d", "2", "--n", "3", "--count", "8", "--seed", "5"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("prompts-5.json")).unwrap();
    let batch = lsa_lab::tasks::PromptBatch::from_json(&text).unwrap();
    assert_eq!(batch.len(), 8);
    assert_eq!(batch.spec.d, 2);
}

#[test]
fn verify_smoke_is_deterministic_across_workers() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let args = |workers: &'static str| {
        vec!["verify", "--suite", "constructions", "--smoke", "--seed", "11", "--workers", workers]
    };
    let a = run(&args("1"), dir_a.path());
    let b = run(&args("4"), dir_b.path());
    // smoke budgets may or may not clear statistical gates; only the payload
    // determinism is asserted here
    assert!(a.status.code().is_some());
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(
        canonical(&dir_a.path().join("constructions-11.json")),
        canonical(&dir_b.path().join("constructions-11.json"))
    );
}

#[test]
fn output_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eta", "--d", "1", "--n", "2", "--sigma", "0.5", "--samples", "1000", "--seed", "21"])
        .env("LSA_LAB_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("eta-21.json").exists());
}

#[test]
fn train_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "train", "--d", "2", "--n", "4", "--sigma", "0.5", "--steps", "40", "--batch-size",
            "16", "--seed", "13",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("train-13.csv")).unwrap();
    assert!(csv.starts_with("step,loss,grad_norm\n"));
    assert!(csv.lines().count() > 2);
    let doc: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("train-13.json")).unwrap(),
    )
    .unwrap();
    // wall time lives in the sidecar only
    assert!(doc["canonical"]["result"].get("wall_time_seconds").is_none());
    assert!(doc["sidecar"]["wall_time_seconds"].is_number());
    assert!(doc["canonical"]["result"]["final_reduced"]["w"].is_array());
}
