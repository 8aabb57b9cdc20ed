use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedls::fedsim::read_model;
use fedls_cli::config::ExperimentConfig;
use fedls_cli::experiment::{build_partition, load_corpus};
use serde_json::Value;
use tempfile::TempDir;

/// ν for ε = 7, δ = 1000^−1.1, τ = 0.05, T = 30, L = 0.3 (uniform), from an
/// independent grid search.
const GOLDEN_NU_EPS7: f64 = 0.6650340475703718;

fn fedls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedls"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const CALIBRATE: [&str; 14] = [
    "accountant", "calibrate", "--mech", "uniform", "--eps", "7", "--delta-exp", "1.1", "--n", "1000", "--tau",
    "0.05", "--rounds", "30",
];

#[test]
fn accountant_golden_noise() {
    let mut args = CALIBRATE.to_vec();
    args.extend(["--clip", "0.3"]);
    let out = fedls(&args);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["nu"].as_f64().unwrap(), GOLDEN_NU_EPS7);
    assert_eq!(v["lambda_star"].as_f64().unwrap(), 0.066);
    assert_eq!(v["feasible"], Value::Bool(true));
    for key in ["mechanism", "epsilon", "delta", "tau", "T", "clip", "alpha"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }

    let mut doubled = CALIBRATE.to_vec();
    doubled.extend(["--clip", "0.6"]);
    let nu2 = stdout_json(&fedls(&doubled))["nu"].as_f64().unwrap();
    assert!((nu2 / GOLDEN_NU_EPS7 - 2.0).abs() < 1e-12);
}

#[test]
fn accountant_exit_codes() {
    let missing = fedls(&["accountant", "calibrate", "--tau", "0.05", "--rounds", "30", "--clip", "0.3", "--n", "10"]);
    assert_eq!(missing.status.code(), Some(2));
    let no_delta = fedls(&["accountant", "budget", "--nu", "1", "--tau", "0.05", "--rounds", "30", "--clip", "0.3"]);
    assert_eq!(no_delta.status.code(), Some(2));

    let infeasible = fedls(&[
        "accountant", "calibrate", "--eps", "3", "--n", "1000", "--tau", "0.05", "--rounds", "30", "--clip", "0.3",
    ]);
    assert_eq!(infeasible.status.code(), Some(3));
    assert_eq!(stdout_json(&infeasible)["feasible"], Value::Bool(false));

    let budget = fedls(&[
        "accountant", "budget", "--nu", "0.6650340475703718", "--n", "1000", "--tau", "0.05", "--rounds", "30",
        "--clip", "0.3",
    ]);
    assert_eq!(budget.status.code(), Some(0));
    let eps = stdout_json(&budget)["epsilon"].as_f64().unwrap();
    assert!((eps - 7.0).abs() < 1e-4, "{eps}");

    let rounds = fedls(&[
        "accountant", "max-rounds", "--nu1", "4", "--tau", "0.001", "--eps", "4", "--delta", "1e-5",
    ]);
    assert_eq!(rounds.status.code(), Some(0));
    assert!(stdout_json(&rounds)["T"].as_u64().unwrap() > 0);
}

fn synthetic_config(dir: &Path, rounds: usize) -> String {
    format!(
        r#"{{
  "data": {{"source": {{"kind": "synthetic", "samples": 1200, "dim": 8, "classes": 3, "separation": 2.0}},
           "n_clients": 20, "per_client": 40}},
  "fed": {{"tau": 0.3, "rounds": {rounds}, "local": {{"epochs": 1}}, "batch_size": 8, "eta_l": 0.1,
          "clip": 0.5, "sigma": 1.0}},
  "privacy": {{"z": 1.0}},
  "output": {{"dir": "{}", "repeat": 2, "spectrum_rounds": [1]}}
}}"#,
        dir.join("out").display()
    )
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn zero_rounds_returns_initial_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &synthetic_config(tmp.path(), 0));
    let out = fedls(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(tmp.path().join("out/metrics_0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let w = read_model(fs::File::open(tmp.path().join("out/model_0.bin")).unwrap()).unwrap();
    assert_eq!(w, vec![0.0; 24]);
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &synthetic_config(tmp.path(), 4));
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = tmp.path().join(format!("t{threads}"));
        let out = fedls(&["run", &cfg, "--threads", threads, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        csvs.push([
            fs::read(out_dir.join("metrics_0.csv")).unwrap(),
            fs::read(out_dir.join("metrics_1.csv")).unwrap(),
            fs::read(out_dir.join("model_1.bin")).unwrap(),
        ]);
        assert!(out_dir.join("spectrum_1_round1.csv").exists());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_ne!(csvs[0][0], csvs[0][1], "repeats use different seeds");
}

#[test]
fn written_config_is_canonical() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), &synthetic_config(tmp.path(), 1));
    assert_eq!(fedls(&["run", &cfg_path]).status.code(), Some(0));
    let written = fs::read_to_string(tmp.path().join("out/config.json")).unwrap();
    let original = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(written.trim_end(), original.canonical());
    let reparsed = ExperimentConfig::from_json(&written).unwrap();
    assert_eq!(reparsed.canonical(), original.canonical());

    let summary: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["privacy"]["source"], "z");
    assert_eq!(summary["privacy"]["nu"].as_f64(), Some(0.5));
    assert_eq!(summary["aggregate"]["test_acc"]["n"].as_u64(), Some(2));
}

#[test]
fn divergence_exits_with_partial_artifacts() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        r#"{{
  "data": {{"source": {{"kind": "quadratic", "dim": 8, "mu": 0.5, "beta": 1.0, "hetero_g": 0.0}},
           "n_clients": 4, "per_client": 1}},
  "fed": {{"tau": 1.0, "rounds": 200, "local": {{"steps": 1}}, "batch_size": 1, "eta_l": 5.0, "clip": 1e12}},
  "privacy": {{"non_private": true}},
  "output": {{"dir": "{}"}}
}}"#,
        tmp.path().join("out").display()
    );
    let cfg = write_config(tmp.path(), &text);
    let out = fedls(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(4));
    let summary: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["aborted"], Value::Bool(true));
    let rows = fs::read_to_string(tmp.path().join("out/metrics_0.csv")).unwrap().lines().count() - 1;
    assert!(rows > 0 && rows < 200, "{rows}");
}

#[test]
fn invalid_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let both = synthetic_config(tmp.path(), 1).replace(r#"{"z": 1.0}"#, r#"{"z": 1.0, "nu": 1.0}"#);
    let cfg = write_config(tmp.path(), &both);
    assert_eq!(fedls(&["run", &cfg]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), &synthetic_config(tmp.path(), 1));
    assert_eq!(fedls(&["run", &cfg, "--repeat", "0"]).status.code(), Some(2));
    assert_eq!(fedls(&["run", "/nonexistent/config.json"]).status.code(), Some(1));
}

#[test]
fn attack_roles_and_shapes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &synthetic_config(tmp.path(), 3));
    assert_eq!(fedls(&["run", &cfg]).status.code(), Some(0));
    let model = tmp.path().join("out/model_0.bin");
    let roc = tmp.path().join("roc.csv");
    let base = ["attack", "--config", &cfg, "--model", model.to_str().unwrap()];

    let mut args = base.to_vec();
    args.extend(["--roc", roc.to_str().unwrap()]);
    let plain = fedls(&args);
    assert_eq!(plain.status.code(), Some(0));
    let a = stdout_json(&plain);
    assert_eq!(a["n_members"], a["n_nonmembers"]);
    assert!(fs::read_to_string(&roc).unwrap().starts_with("fpr,tpr\n"));

    let mut args = base.to_vec();
    args.push("--flip");
    let flipped = stdout_json(&fedls(&args));
    let sum = a["auc"].as_f64().unwrap() + flipped["auc"].as_f64().unwrap();
    assert!((sum - 1.0).abs() < 1e-12);

    // two disjoint slices of hold-out rows: neither side was trained on
    let members = tmp.path().join("m.txt");
    let non_members = tmp.path().join("n.txt");
    let config = ExperimentConfig::load(&cfg).unwrap();
    let corpus = load_corpus(&config).unwrap().unwrap();
    let holdout = build_partition(&config, &corpus, config.repeat_seed(0)).unwrap().holdout;
    assert_eq!(holdout.len(), 400);
    let rows = |r: &[usize], sep: &str| r.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(sep);
    fs::write(&members, rows(&holdout[..200], "\n")).unwrap();
    fs::write(&non_members, rows(&holdout[200..], " ")).unwrap();
    let mut args = base.to_vec();
    args.extend(["--members", members.to_str().unwrap(), "--non-members", non_members.to_str().unwrap()]);
    let out = fedls(&args);
    assert_eq!(out.status.code(), Some(0));
    let auc = stdout_json(&out)["auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() < 0.1, "{auc}");

    let wrong = tmp.path().join("wrong.bin");
    fedls::fedsim::write_model(&[0.0; 5], fs::File::create(&wrong).unwrap()).unwrap();
    let out = fedls(&["attack", "--config", &cfg, "--model", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectrum_of_saved_vector() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("v.bin");
    // 1/k amplitude profile over 64 coordinates
    let d = 64;
    let v: Vec<f64> = (0..d)
        .map(|i| {
            (1..d / 2)
                .map(|k| (2.0 * std::f64::consts::PI * (k * i) as f64 / d as f64).cos() / k as f64)
                .sum()
        })
        .collect();
    fedls::fedsim::write_model(&v, fs::File::create(&path).unwrap()).unwrap();
    let csv = tmp.path().join("s.csv");
    let out = fedls(&["spectrum", "--input", path.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let slope = stdout_json(&out)["loglog_slope"].as_f64().unwrap();
    assert!(slope < -0.5, "{slope}");
    assert!(fs::read_to_string(&csv).unwrap().starts_with("freq,magnitude\n"));
}
