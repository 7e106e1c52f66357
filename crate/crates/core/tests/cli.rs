//! End-to-end runs of the `bsdelab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn bsdelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsdelab"))
        .args(args)
        .output()
        .unwrap()
}

fn run_into(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    bsdelab(&args)
}

fn row(csv: &str, name: &str) -> (f64, Option<f64>) {
    let line = csv
        .lines()
        .find(|l| l.starts_with(&format!("{name},")))
        .unwrap();
    let cols: Vec<&str> = line.split(',').collect();
    (cols[1].parse().unwrap(), cols[2].parse().ok())
}

#[test]
fn bond_run_writes_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(&config("bond.toml"), dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.starts_with("name,value,stderr,method\n"));
    let (price, _) = row(&csv, "fair_price");
    assert!((price - (-0.05f64).exp()).abs() < 1e-12);
    assert!((price - 0.9512).abs() < 5e-5);
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("seed: 1"));
    assert!(summary.contains("wall_time_seconds"));
    assert!(summary.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_seed_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("bond.toml"))
        .unwrap()
        .replace("seed = 1\n", "");
    let cfg = dir.path().join("noseed.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = run_into(&cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn bad_field_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("bond.toml"))
        .unwrap()
        .replace("sigma = [0.2]", "sigma = [0.2, 0.1]");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = run_into(&cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("market.sigma"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = run_into(
            &config("solve.toml"),
            dir.path(),
            &["--paths", "5000", "--steps", "20"],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let first = std::fs::read(a.path().join("results.csv")).unwrap();
    let second = std::fs::read(b.path().join("results.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn overrides_change_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_into(
        &config("call.toml"),
        a.path(),
        &["--paths", "3000", "--steps", "10", "--seed", "1"],
    );
    run_into(
        &config("call.toml"),
        b.path(),
        &["--paths", "3000", "--steps", "10", "--seed", "2"],
    );
    let first = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
    let second = std::fs::read_to_string(b.path().join("results.csv")).unwrap();
    assert_ne!(first, second);
    let summary = std::fs::read_to_string(b.path().join("summary.txt")).unwrap();
    assert!(summary.contains("seed: 2"));
    assert!(summary.contains("paths = 3000"));
}

#[test]
fn unstable_driver_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(&config("unstable.toml"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Δt·C"));
    let cfg = config("unstable.toml");
    let out = bsdelab(&[
        "validate",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn validation_passes_at_default_and_reduced_scale() {
    for paths in ["20000", "2000"] {
        let dir = tempfile::tempdir().unwrap();
        let out = bsdelab(&[
            "validate",
            config("validate.toml").to_str().unwrap(),
            "--paths",
            paths,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(out.status.success(), "{paths} paths:\n{csv}");
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",pass")), "{csv}");
        assert!(csv.lines().count() > 10);
    }
}

#[test]
fn every_experiment_kind_runs() {
    for (cfg, name) in [
        ("borrow.toml", "borrowing_price"),
        ("utility.toml", "optimal_log_wealth"),
        ("solve.toml", "y0_backward_euler"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_into(
            &config(cfg),
            dir.path(),
            &["--paths", "4000", "--steps", "20"],
        );
        assert!(
            out.status.success(),
            "{cfg}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let (value, _) = row(&csv, name);
        assert!(value.is_finite());
    }
}
