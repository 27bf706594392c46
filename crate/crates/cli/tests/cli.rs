use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn radar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radar"))
        .args(args)
        .env("RADAR_WORKERS", "2")
        .output()
        .expect("spawn radar")
}

fn small_run(out: &Path) -> Output {
    radar(&[
        "run",
        "--dim",
        "10",
        "--budget",
        "100",
        "--trials",
        "1",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn tiny_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in [
        "traces.csv",
        "summary.csv",
        "rates.csv",
        "runs/trace_radar_trial0.csv",
    ] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(
        summary.starts_with("algorithm,iteration,mean_error_l2_sq,stderr,slope_trailing_decade\n")
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(small_run(a.path()).status.success());
    assert!(small_run(b.path()).status.success());
    for name in ["traces.csv", "summary.csv", "rates.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn fit_reproduces_run_summary() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_run(dir.path()).status.success());
    let fit_dir = dir.path().join("fit");
    let traces = dir.path().join("traces.csv");
    let out = radar(&[
        "fit",
        traces.to_str().unwrap(),
        "--out",
        fit_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(dir.path().join("summary.csv")).unwrap(),
        fs::read(fit_dir.join("summary.csv")).unwrap()
    );
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# logistic smoke run\ndim = 12\nbudget = 200\ntrials = 2\nalgorithms = radar, sgd\nloss = logistic\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = radar(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--algo",
        "rda",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rates = fs::read_to_string(out_dir.join("rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 2);
    assert!(rates.contains("\nrda,200,"));
}

#[test]
fn exit_codes() {
    assert_eq!(
        radar(&["run", "--dim", "2", "--trials", "0"]).status.code(),
        Some(1)
    );
    assert_eq!(
        radar(&["run", "--epoch-mode", "sideways"]).status.code(),
        Some(1)
    );
    assert_eq!(radar(&["run", "--algo", "adam"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(small_run(&blocker.join("sub")).status.code(), Some(3));
    let missing = dir.path().join("none.csv");
    assert_eq!(
        radar(&["fit", missing.to_str().unwrap()]).status.code(),
        Some(3)
    );
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "nope\n").unwrap();
    assert_eq!(
        radar(&["fit", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn prox_check_passes() {
    let out = radar(&["prox-check", "--instances", "5"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS] 1."));
}
