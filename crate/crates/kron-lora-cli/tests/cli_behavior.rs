//! End-to-end behavior of the `kronlora` binary: exit codes, report files,
//! schema conformance, and config error reporting.

mod common;

use common::{assert_valid_report, load_json, run, workspace_root};
use std::path::PathBuf;
use tempfile::TempDir;

fn configs() -> PathBuf {
    workspace_root().join("configs")
}

fn stderr_of(output: &std::process::Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn verify_passes_and_report_validates() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--seed", "5",
        "--out", out.path().to_str().unwrap(),
        "verify",
        "--trials", "12",
        "--rank-trials", "8",
        "--grad-trials", "2",
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    let report = load_json(&out.path().join("verify.json"));
    assert_valid_report(&report);
    assert_eq!(report["verify"]["all_passed"], true);
    assert_eq!(report["verify"]["suites"].as_array().unwrap().len(), 4);
    assert_eq!(report["manifest"]["seed"], 5);
}

#[test]
fn sabotaged_verify_fails_with_nonzero_exit() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--seed", "5",
        "--out", out.path().to_str().unwrap(),
        "verify",
        "--trials", "3",
        "--rank-trials", "3",
        "--grad-trials", "1",
        "--sabotage",
    ]);
    assert_eq!(o.status.code(), Some(1), "sabotage must fail the run");
    let report = load_json(&out.path().join("verify.json"));
    assert_valid_report(&report);
    assert_eq!(report["verify"]["all_passed"], false);
    let suites = report["verify"]["suites"].as_array().unwrap();
    let chain = suites
        .iter()
        .find(|s| s["name"] == "chain_reshape")
        .expect("chain suite present");
    assert_eq!(chain["passed"], false);
    assert!(
        chain["failing_case"].is_string(),
        "failing case is serialized into the report"
    );
}

#[test]
fn plan_reports_parameter_and_checkpoint_sizes() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "plan",
        "--d-in", "768",
        "--d-out", "768",
        "--rank", "8",
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    let report = load_json(&out.path().join("plan.json"));
    assert_valid_report(&report);
    let plans = report["plan"]["plans"].as_array().unwrap();
    let by_kind = |k: &str| {
        plans
            .iter()
            .find(|p| p["kind"] == k)
            .unwrap_or_else(|| panic!("{k} plan present"))
    };
    assert_eq!(by_kind("kronlora")["parameters"], 4616);
    assert_eq!(by_kind("lora")["parameters"], 8 * (768 + 768));
    assert_eq!(by_kind("lora")["params_ratio_vs_lora"], 1.0);
    let krona_notes = by_kind("krona")["notes"].as_array().unwrap();
    assert!(
        krona_notes
            .iter()
            .any(|n| n.as_str().unwrap().starts_with("accuracy-risk: pure Kronecker")),
        "pure Kronecker plans carry the accuracy-risk note"
    );
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let o = run(&["plan", "--d-out", "64"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["plan", "--d-in", "64", "--d-out", "64", "--slice", "4", "--target-slice", "9"]);
    assert_eq!(o.status.code(), Some(2), "conflicting slice flags are a usage error");
}

#[test]
fn train_runs_from_config_and_saves_a_checkpoint() {
    let out = TempDir::new().unwrap();
    let config = configs().join("train_teacher.toml");
    let o = run(&[
        "--seed", "7",
        "--out", out.path().to_str().unwrap(),
        "train",
        config.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    let report = load_json(&out.path().join("train.json"));
    assert_valid_report(&report);
    assert_eq!(report["train"]["task"], "teacher_regression");
    assert_eq!(report["train"]["report"]["checkpoint_file"], "train.ckpt");
    let ckpt = out.path().join("train.ckpt");
    let on_disk = std::fs::metadata(&ckpt).expect("checkpoint written").len();
    assert_eq!(
        report["train"]["report"]["checkpoint_bytes"].as_u64().unwrap(),
        on_disk
    );
}

/// Checkpoints are saved before the report, so commands must create the
/// output directory themselves instead of relying on the report writer.
#[test]
fn missing_out_directory_is_created() {
    let out = TempDir::new().unwrap();
    let nested = out.path().join("does/not/exist/yet");
    let config = configs().join("train_teacher.toml");
    let o = run(&[
        "--seed", "7",
        "--out", nested.to_str().unwrap(),
        "train",
        config.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    assert!(nested.join("train.json").is_file());
    assert!(nested.join("train.ckpt").is_file());
}

#[test]
fn unknown_config_field_is_named_in_the_error() {
    let out = TempDir::new().unwrap();
    let bad = out.path().join("bad.toml");
    std::fs::write(
        &bad,
        r#"
[layer]
d_in = 16
d_out = 16

[adapter]
kind = "kronlora"
rank = 4
slice = 4

[task]
task = "cluster_classification"
seed = 1
n_class = 4

[train]
"#,
    )
    .unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "train",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_of(&o);
    assert!(err.contains("n_class"), "error names the bad field: {err}");
}

#[test]
fn conflicting_slice_policies_in_config_are_rejected() {
    let out = TempDir::new().unwrap();
    let bad = out.path().join("bad.toml");
    std::fs::write(
        &bad,
        r#"
[layer]
d_in = 16
d_out = 16

[adapter]
kind = "kronlora"
rank = 4
slice = 4
target_slice = 8

[task]
task = "teacher_regression"
seed = 1

[train]
"#,
    )
    .unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "train",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_of(&o).contains("mutually exclusive"));
}

#[test]
fn sequential_runs_every_arm_and_spot_checks_deltas() {
    let out = TempDir::new().unwrap();
    let config = configs().join("sequential_compare.toml");
    let o = run(&[
        "--seed", "7",
        "--out", out.path().to_str().unwrap(),
        "sequential",
        config.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    let report = load_json(&out.path().join("sequential.json"));
    assert_valid_report(&report);
    let arms = report["sequential"]["arms"].as_object().unwrap();
    assert_eq!(arms.len(), 2);
    for kind in ["kronlora", "lora"] {
        let arm = &arms[kind];
        assert_eq!(arm["delta_check"]["exact_match"], true);
        for phase in ["phase1", "phase2"] {
            let ckpt = out.path().join(format!("{kind}_{phase}.ckpt"));
            assert!(ckpt.exists(), "{} written", ckpt.display());
        }
    }
}

#[test]
fn sequential_rejects_regression_tasks() {
    let out = TempDir::new().unwrap();
    let bad = out.path().join("bad.toml");
    std::fs::write(
        &bad,
        r#"
arms = ["kronlora"]

[layer]
d_in = 16
d_out = 16

[adapter]
rank = 4
slice = 4

[task1]
task = "teacher_regression"
seed = 1

[task2]
task = "cluster_classification"
seed = 2
n_classes = 4

[train]
"#,
    )
    .unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "sequential",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_of(&o).contains("cluster_classification"));
}

#[test]
fn bench_requires_at_least_three_repeats() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "bench",
        "--d-in", "32",
        "--d-out", "32",
        "--repeats", "2",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_of(&o).contains("repeats"));
}

#[test]
fn bench_report_validates_for_a_single_kind() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "bench",
        "--kind", "kronlora",
        "--d-in", "64",
        "--d-out", "64",
        "--repeats", "3",
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    let report = load_json(&out.path().join("bench.json"));
    assert_valid_report(&report);
    let bench = &report["bench"];
    assert_eq!(bench["reports"].as_array().unwrap().len(), 1);
    assert!(bench.get("comparison").is_none(), "no ratio without both kinds");
}

#[test]
fn json_flag_prints_the_envelope_to_stdout() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "--json",
        "verify",
        "--trials", "3",
        "--rank-trials", "3",
        "--grad-trials", "1",
    ]);
    assert!(o.status.success(), "{}", stderr_of(&o));
    let stdout: serde_json::Value =
        serde_json::from_slice(&o.stdout).expect("stdout is the JSON envelope");
    assert_eq!(stdout["command"], "verify");
    assert_valid_report(&stdout);
}

#[test]
fn missing_config_file_reports_the_path() {
    let out = TempDir::new().unwrap();
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "train",
        "/definitely/not/here.toml",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_of(&o).contains("not/here.toml"));
}
