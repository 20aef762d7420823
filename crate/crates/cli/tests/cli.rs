use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn biaslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biaslab")).args(args).env_remove("BIASLAB_WORKERS").output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = biaslab(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

fn csv_files(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn fig1_writes_series_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fig1");
    run_ok(&["run", "fig1", "--set", "replicas=50", "--seed", "3", "--out", out.to_str().unwrap()]);
    let basins = read(&out, "basins.csv");
    assert!(basins.starts_with("scheme,theta0,near_minus,near_plus,unclassified,diverged\n"));
    assert_eq!(basins.lines().count(), 1 + 2 * 2);
    assert!(read(&out, "trajectory_resampling_theta0_2.csv").starts_with("step,theta\n0,2.0\n"));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest["experiment"], "fig1");
    assert_eq!(manifest["version"], biaslab::VERSION);
    assert_eq!(manifest["config"]["seed"], "3");
    assert_eq!(manifest["config"]["eta"], "0.5");
    assert!(basins.contains("resampling,2.0,"));
    assert!(manifest["timestamp"].as_str().unwrap().contains('T'));
    for s in manifest["series"].as_array().unwrap() {
        assert!(out.join(s["file"].as_str().unwrap()).exists());
        for c in s["columns"].as_array().unwrap() {
            assert!(!c["meaning"].as_str().unwrap().is_empty());
        }
    }
}

#[test]
fn embedded_config_reproduces_series_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    run_ok(&["run", "fig2", "--set", "replicas=8", "--set", "steps=500", "--out", first.to_str().unwrap()]);
    let second = tmp.path().join("second");
    let cfg = first.join("config.txt");
    run_ok(&["run", "fig2", "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    let (a, b) = (csv_files(&first), csv_files(&second));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("stab.txt");
    fs::write(&cfg, "# comment\neta = 0.25, 0.5\nschemes = reweighting\n").unwrap();
    let out = tmp.path().join("stab");
    run_ok(&["run", "stability-table", "--config", cfg.to_str().unwrap(), "--set", "eta=0.5", "--out", out.to_str().unwrap()]);
    let table = read(&out, "stability.csv");
    assert_eq!(table.lines().count(), 1 + 2);
    let row: Vec<&str> = table.lines().find(|l| l.starts_with("reweighting,1.0,0.5,")).unwrap().split(',').collect();
    assert!((row[3].parse::<f64>().unwrap() - 1.3).abs() < 1e-12);
    assert!(!table.contains("resampling"));
}

#[test]
fn every_invalid_field_is_reported_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = biaslab(&[
        "run",
        "fig1",
        "--set",
        "a=0.3,0.3",
        "--set",
        "f=0.5,0.6",
        "--set",
        "steps=0",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["a:", "f:", "steps:"] {
        assert!(err.contains(field), "{field} missing from {err}");
    }
}

#[test]
fn unknown_experiment_and_bad_usage_exit_one() {
    assert_eq!(biaslab(&["run", "fig9"]).status.code(), Some(1));
    assert_eq!(biaslab(&["run", "fig1", "--set", "novalue"]).status.code(), Some(1));
    assert_eq!(biaslab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(biaslab(&["run", "fig1", "--set", "bogus=1"]).status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = biaslab(&[
        "run",
        "fig4",
        "--set",
        "eta=1e300",
        "--set",
        "steps=2000",
        "--set",
        "replicas=1",
        "--set",
        "c=0",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_writes_one_record_per_eta_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    run_ok(&["run", "sweep-quadratic", "--set", "replicas=20", "--out", out.to_str().unwrap()]);
    for eta in ["0.3", "0.4", "0.5", "0.6"] {
        let dir = out.join(format!("eta_{eta}"));
        let manifest: serde_json::Value = serde_json::from_str(&read(&dir, "manifest.json")).unwrap();
        assert_eq!(manifest["config"]["eta"], eta);
    }
    let summary = read(&out, "basins_by_eta.csv");
    assert!(summary.starts_with("eta,scheme,theta0,"));
    assert_eq!(summary.lines().count(), 1 + 4 * 2 * 2);
}

#[test]
fn descending_sweep_rejected() {
    let out = biaslab(&["run", "sweep-linear", "--set", "eta=0.13,0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ascending"));
}

#[test]
fn worker_variable_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_biaslab"))
        .args(["run", "stability-table", "--out", tempfile::tempdir().unwrap().path().to_str().unwrap()])
        .env("BIASLAB_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let ok = Command::new(env!("CARGO_BIN_EXE_biaslab"))
        .args(["run", "stability-table", "--out", tmp.path().to_str().unwrap()])
        .env("BIASLAB_WORKERS", "2")
        .output()
        .unwrap();
    assert!(ok.status.success());
}

#[test]
fn list_names_every_experiment() {
    let out = biaslab(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["fig1", "fig2", "fig4", "sweep-quadratic", "sweep-linear", "stability-table", "gibbs-table", "variance-check"] {
        assert!(text.contains(name), "{name}");
    }
}
