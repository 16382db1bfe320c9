//! Exit statuses and error payloads of the `robustedit` binary.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("robustedit-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustedit")).args(args).output().unwrap()
}

fn error_code(o: &Output) -> String {
    let v: Value = serde_json::from_slice(&o.stderr).expect("stderr is one JSON object");
    v["error"]["code"].as_str().unwrap().to_string()
}

const SMALL: [&str; 8] = ["--n-layers", "2", "--d-model", "16", "--d-ff", "32", "--max-new-tokens", "2"];

#[test]
fn identical_prompts_exit_with_no_robustness_gap() {
    let d = scratch("gap");
    let data = d.join("data.jsonl");
    fs::write(
        &data,
        r#"{"task_id":"t0","category":"c","prompt_ori":"a + b","prompt_pert":"a + b","checker":{"type":"reference_match"}}"#,
    )
    .unwrap();
    let mut args = vec!["edit", "--dataset", data.to_str().unwrap(), "--out", d.to_str().unwrap()];
    args.extend(SMALL);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_code(&o), "NO_ROBUSTNESS_GAP");
    assert!(!d.join("edited.crml").exists());
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let d = scratch("cfg");
    let cfg = d.join("config.json");
    fs::write(&cfg, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let o = run(&["gen-model", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_code(&o), "CONFIG_ERROR");
}

#[test]
fn missing_inputs_and_out_are_config_errors() {
    let d = scratch("missing");
    let o = run(&["gen-model"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_code(&o), "CONFIG_ERROR");

    let o = run(&["trace", "--model", "/nonexistent/model.crml", "--dataset", "x", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let bad = d.join("report.json");
    fs::write(&bad, "not json").unwrap();
    let o = run(&["report", "--input", bad.to_str().unwrap(), "--out", d.join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn conflicting_ablations_are_rejected() {
    let d = scratch("ablate");
    let o = run(&["edit", "--no-localization", "--layer", "1", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_code(&o), "CONFIG_ERROR");
}

#[test]
fn manual_layer_out_of_range_is_a_module_error() {
    let d = scratch("layer");
    let g = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/golden_a");
    let cfg = g.join("config.json");
    let out = d.join("data");
    let o = run(&[
        "make-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--prompts",
        g.join("prompts.txt").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = run(&[
        "edit",
        "--config",
        cfg.to_str().unwrap(),
        "--layer",
        "7",
        "--dataset",
        out.join("dataset.jsonl").to_str().unwrap(),
        "--out",
        d.join("edit").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_code(&o), "LAYER_INDEX_ERROR");
}

#[test]
fn help_and_unknown_flags_use_clap_statuses() {
    assert!(run(&["--help"]).status.success());
    assert_eq!(run(&["trace", "--bogus"]).status.code(), Some(2));
}
