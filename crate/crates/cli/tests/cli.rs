use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blnn::convexnet::{ActivationKind, IcnnParams};
use blnn::lft::SolverConfig;
use blnn::model::{Blnn, BlnnConfig, ModelBundle};

fn blnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, value.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn estimate_of_trivial_bundle_reports_four() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model.json");
    let m = Blnn::new(
        IcnnParams::zero(2, ActivationKind::Softplus),
        BlnnConfig::new(1.0, 3.0).unwrap(),
    )
    .unwrap();
    ModelBundle::new(&m, &SolverConfig::newton(1e-12, 50))
        .save(&model)
        .unwrap();
    let out_root = tmp.path().join("runs");
    let out = blnn(&[
        "estimate",
        "--model",
        model.to_str().unwrap(),
        "--samples",
        "200",
        "--out",
        out_root.to_str().unwrap(),
    ]);
    let dir = run_dir(&out);
    assert!(dir.starts_with(out_root.join("estimate")));
    let metrics = json(&dir.join("metrics.json"));
    assert!((metrics["lip_hat"].as_f64().unwrap() - 4.0).abs() < 1e-9);
    assert!((metrics["invlip_hat"].as_f64().unwrap() - 4.0).abs() < 1e-9);
    let config = json(&dir.join("config.json"));
    assert_eq!(config["n_samples"], 200);
}

#[test]
fn gradcheck_passes_on_ten_nets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blnn(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    let dir = run_dir(&out);
    let metrics = json(&dir.join("metrics.json"));
    assert!(metrics["max_rel_error"].as_f64().unwrap() < 1e-4);
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn runs_are_reproducible_given_config_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "tight.json",
        serde_json::json!({
            "bounds": [3.0],
            "seeds": 2,
            "eval": {"every": 0, "lo": -1.0, "hi": 1.0, "n_samples": 50},
            "setup": {"hidden": [4], "epochs": 2, "batch_size": 16, "n_train": 32}
        }),
    );
    let root = tmp.path().to_str().unwrap();
    let a = run_dir(&blnn(&[
        "tightness",
        "--config",
        &cfg,
        "--seed",
        "7",
        "--out",
        root,
    ]));
    let b = run_dir(&blnn(&[
        "tightness",
        "--config",
        &cfg,
        "--seed",
        "7",
        "--out",
        root,
        "--threads",
        "1",
    ]));
    assert_ne!(a, b);
    let strip = |p: &Path| {
        // drop the wall-clock column
        std::fs::read_to_string(p.join("results.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(json(&a.join("config.json"))["seed"], 7);
    assert_eq!(
        json(&a.join("config.json"))["setup"]["hidden"],
        serde_json::json!([4])
    );
}

#[test]
fn two_moons_writes_grid_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "moons.json",
        serde_json::json!({
            "n_train": 64, "n_test": 20, "hidden": [4], "feature_dim": 6, "centroid_dim": 3,
            "epochs": 1, "batch_size": 32, "grid_size": 5, "n_background": 10
        }),
    );
    let dir = run_dir(&blnn(&[
        "two-moons",
        "--config",
        &cfg,
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    let grid = std::fs::read_to_string(dir.join("grid.csv")).unwrap();
    assert!(grid.starts_with("x,y,certainty\n"));
    assert_eq!(grid.lines().count(), 26);
    let metrics = json(&dir.join("metrics.json"));
    assert!(metrics["mean_accuracy"].as_f64().is_some());
}

#[test]
fn failed_checks_exit_nonzero_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    // an impossible threshold turns the gradient check into a failure
    let cfg = write_config(
        tmp.path(),
        "gc.json",
        serde_json::json!({"nets": 1, "threshold": 0.0}),
    );
    let out = blnn(&[
        "gradcheck",
        "--config",
        &cfg,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    let report = json(&dir.join("failures.json"));
    assert_eq!(report["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_input_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blnn(&[
        "estimate",
        "--model",
        tmp.path().join("missing.json").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "bad.json", serde_json::json!({"nets": "ten"}));
    let out = blnn(&["gradcheck", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parsing"));
}
