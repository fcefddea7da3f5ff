//! End-to-end tests of the command-line pipeline on the built binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn scdesign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scdesign"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small simulated panel: 6 units, 12 periods (9 pre, 6 fitting).
fn simulate_small(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "--seed", "5", "--out", ".",
        "simulate", "--j", "6", "--t", "12", "--t0", "9", "--t-e", "6", "--r", "1", "--factors", "2",
    ];
    args.extend_from_slice(extra);
    scdesign(dir, &args)
}

#[test]
fn full_pipeline_on_simulated_panel() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    let out = simulate_small(dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["outcomes.csv", "covariates.csv", "weights.csv", "truth.json"] {
        assert!(dir.join(file).exists(), "missing {file}");
    }

    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "design", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--weights", "weights.csv", "--t0", "9", "--t-e", "6",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("unit"), "table header missing:\n{stdout}");
    assert!(stdout.contains("1.00"), "weight rows should sum to 1.00:\n{stdout}");

    // Realize observed outcomes for the chosen design, then estimate.
    let out = simulate_small(dir, &["--realize", "design.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "estimate", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "6", "--design", "design.json", "--truth", "truth.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let estimate = read_json(&dir.join("estimate.json"));
    assert_eq!(estimate["tau_hat"].as_array().unwrap().len(), 3);
    assert!(estimate["mae"].is_number());

    let out = scdesign(dir, &["--out", ".", "infer", "--estimate", "estimate.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inference = read_json(&dir.join("inference.json"));
    // T1 = 3, T_B = 3: |Pi| = 20.
    assert_eq!(inference["n_combinations"], 20);
    assert_eq!(inference["mode"], "exact");

    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "report", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "6", "--design", "design.json",
            "--estimate", "estimate.json", "--inference", "inference.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.join("summary.json"));
    assert!(summary["p_value"]["value"].is_number());
    assert!(summary["mae"].is_number());

    // gap.csv: pre-period gaps small relative to post-period effects under
    // the alternative.
    let gap = fs::read_to_string(dir.join("gap.csv")).unwrap();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for line in gap.lines().skip(1) {
        let (period, value) = line.split_once(',').unwrap();
        let period: usize = period.parse().unwrap();
        let value: f64 = value.parse().unwrap();
        if period <= 9 {
            pre.push(value.abs());
        } else {
            post.push(value.abs());
        }
    }
    assert_eq!(pre.len(), 9);
    assert_eq!(post.len(), 3);
    let pre_mean = pre.iter().sum::<f64>() / pre.len() as f64;
    let post_mean = post.iter().sum::<f64>() / post.len() as f64;
    assert!(
        pre_mean < post_mean,
        "expected small pre-period gaps: pre {pre_mean} vs post {post_mean}"
    );
}

#[test]
fn identical_inputs_give_byte_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    assert!(simulate_small(dir, &[]).status.success());
    for sub in ["a", "b"] {
        let out = scdesign(
            dir,
            &[
                "--out", sub,
                "design", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
                "--t0", "9", "--t-e", "6", "--kind", "penalized", "--lambda", "0.5",
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.join("a/design.json")).unwrap();
    let b = fs::read(dir.join("b/design.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cardinality_one_design_is_one_hot() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    assert!(simulate_small(dir, &[]).status.success());
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "design", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "6", "--kind", "constrained", "--m-hi", "1",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let design = read_json(&dir.join("design.json"));
    let w: Vec<f64> =
        design["w"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let nonzero: Vec<f64> = w.iter().copied().filter(|&x| x != 0.0).collect();
    assert_eq!(nonzero, vec![1.0]);
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    fs::write(dir.join("bad.json"), "{\"no_such_key\": true}").unwrap();
    let out = scdesign(
        dir,
        &["--config", "bad.json", "--out", "result", "design"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("result/design.json").exists(), "no output files on config error");
}

#[test]
fn report_without_inference_omits_p_value() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    assert!(simulate_small(dir, &[]).status.success());
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "design", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "6",
        ],
    );
    assert!(out.status.success());
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "report", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "6", "--design", "design.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.join("summary.json"));
    assert!(summary.get("p_value").is_none());
    assert!(dir.join("paths.csv").exists());
}

#[test]
fn qcqp_export_matches_worked_example() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    fs::write(
        dir.join("y.csv"),
        "unit,period,value\na,1,1\na,2,9\nb,1,3\nb,2,9\n",
    )
    .unwrap();
    fs::write(dir.join("z.csv"), "unit\na\nb\n").unwrap();
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "export-qcqp", "--outcomes", "y.csv", "--covariates", "z.csv",
            "--t0", "1", "--t-e", "1", "--no-scaling",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let qcqp = read_json(&dir.join("qcqp.json"));
    assert_eq!(qcqp["J"], 2);
    assert_eq!(qcqp["M"], 1);
    assert_eq!(qcqp["P0"][0], serde_json::json!([1.0, 3.0, 0.0, 0.0]));
    assert_eq!(qcqp["P0"][1], serde_json::json!([3.0, 9.0, 0.0, 0.0]));
    assert_eq!(qcqp["q0"], serde_json::json!([-4.0, -12.0, -4.0, -12.0]));
    assert_eq!(qcqp["P1"][0], serde_json::json!([0.0, 0.0, 1.0, 0.0]));
    assert_eq!(qcqp["e1"], serde_json::json!([1.0, 1.0, 0.0, 0.0]));
    assert_eq!(qcqp["e2"], serde_json::json!([0.0, 0.0, 1.0, 1.0]));
}

#[test]
fn infeasible_design_exits_with_code_four() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    assert!(simulate_small(dir, &[]).status.success());
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "design", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "6",
            "--budget-costs", "9,9,9,9,9,9", "--budget-bound", "1",
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn inference_without_blank_periods_exits_with_code_five() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    // T_E = T0 leaves no blank periods.
    assert!(simulate_small(dir, &[]).status.success());
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "design", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "9",
        ],
    );
    assert!(out.status.success());
    assert!(simulate_small(dir, &["--realize", "design.json"]).status.success());
    let out = scdesign(
        dir,
        &[
            "--out", ".",
            "estimate", "--outcomes", "outcomes.csv", "--covariates", "covariates.csv",
            "--t0", "9", "--t-e", "9", "--design", "design.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = scdesign(dir, &["--out", ".", "infer", "--estimate", "estimate.json"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_upstream_artifact_exits_with_code_three() {
    let dir = TempDir::new().unwrap();
    let dir = dir.path();
    let out = scdesign(dir, &["--out", ".", "infer", "--estimate", "nope.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
