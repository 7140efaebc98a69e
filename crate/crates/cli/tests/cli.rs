use std::path::Path;
use std::process::{Command, Output};

fn tailbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailbench")).args(args).output().expect("spawn tailbench")
}

fn write_config(dir: &Path, extra: &str, replicas: usize) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"{{"dataset": {{"kind": "synthetic", "n": 150, "d": 8}},
            "optim": {{"gamma": 0.05, "delta": 0.0, "B": 1, "K": 100, "seed": 0, "replicas": {replicas}}},
            "analysis": {{"stable_draws": 10000}},
            {extra}
            "output_dir": {:?}, "seed": 3}}"#,
        out.display().to_string()
    );
    let path = dir.join("exp.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn bounds_from_lambda1_matches_tabulated_row() {
    let out = tailbench(&["bounds", "--n", "2000", "--d", "200", "--B", "1", "--gamma", "0.015", "--delta", "0", "--lambda1", "319.83"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["eta_upper"].as_f64().unwrap() - 3.61).abs() < 0.01);
    assert!(v["eta_lower"].is_null());
}

#[test]
fn bounds_from_spectrum_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("spec.csv");
    std::fs::write(&path, "1.0\n2.0\n").unwrap();
    let out = tailbench(&["bounds", "--n", "4", "--d", "2", "--B", "1", "--gamma", "0.5", "--spectrum", path.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["eta_lower"].as_f64().unwrap() - 4.75).abs() < 1e-12);
    assert!((v["eta_upper"].as_f64().unwrap() - 5.0).abs() < 1e-12);
    assert!((v["gamma_bar"].as_f64().unwrap() - 1.6).abs() < 1e-12);
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": {"kind": "synthetic", "n": 10}}"#).unwrap();
    assert_eq!(tailbench(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(tailbench(&["run", "--config", "/nonexistent/exp.json"]).status.code(), Some(1));
    assert_eq!(tailbench(&["bounds", "--n", "10"]).status.code(), Some(1));
    assert_eq!(tailbench(&["bounds", "--n", "10", "--d", "1", "--B", "1", "--gamma", "-1", "--lambda1", "2"]).status.code(), Some(1));
    let sweepless = write_config(tmp.path(), "", 10);
    assert_eq!(tailbench(&["sweep", "--config", sweepless.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bad_worker_budget_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_tailbench"))
        .args(["bounds", "--n", "10", "--d", "1", "--B", "1", "--gamma", "0.1", "--lambda1", "2"])
        .env("TAILBENCH_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_bundle_and_smoke_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", 1);
    let out = Command::new(env!("CARGO_BIN_EXE_tailbench"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("TAILBENCH_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["bounds.json", "ensemble.csv", "manifest.json"] {
        assert!(tmp.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn sweep_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#""sweep": {"parameter": "B", "values": [1, 2]},"#, 100);
    let out = tailbench(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("out/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn verify_fast_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    let out = tailbench(&["verify", "--level", "fast", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["failed"], 0);
    assert!(v["checks"].as_array().unwrap().len() >= 9);
    assert!(String::from_utf8_lossy(&out.stdout).lines().any(|l| l.starts_with("PASS covariance_enumeration")));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            tailbench::experiment::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 5);
}
