use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lepski-huber"))
}

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_20x5.csv")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_defaults_converge_and_write_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let res = run(bin().arg("fit").arg(sample()).arg("--out").arg(&out));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v = read_json(&out);
    assert_eq!(v["beta"].as_array().unwrap().len(), 5);
    assert_eq!(v["converged"], true);
    assert!(v["kkt_residual"].as_f64().unwrap() <= 1e-8);
    let manifest = read_json(&dir.path().join("fit.manifest.json"));
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["invocation"]["command"], "fit");
}

#[test]
fn invalid_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let res = run(bin().arg("fit").arg(sample()).args(["--tau", "-1", "--out"]).arg(&out));
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("tau"));
    assert!(!out.exists());

    let res = run(bin().args(["fit", "no/such/file.csv", "--out"]).arg(&out));
    assert_eq!(code(&res), 1);

    let res = run(bin().arg("frobnicate"));
    assert_eq!(code(&res), 1);
}

#[test]
fn adapt_selects_and_handles_empty_selection() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("adapt.json");
    let res = run(bin().arg("adapt").arg(sample()).args(["--k", "2", "--M", "1", "--out"]).arg(&out));
    assert_eq!(code(&res), 0);
    assert_eq!(read_json(&out)["j_star"], 1);

    // one iteration per grid fit: nothing converges, so nothing is eligible
    let none = dir.path().join("none.json");
    let res = run(bin().arg("adapt").arg(sample()).args(["--k", "2", "--max-iter", "1", "--out"]).arg(&none));
    assert_eq!(code(&res), 3);

    let fb = dir.path().join("fb.json");
    let res = run(bin().arg("adapt").arg(sample()).args(["--k", "2", "--max-iter", "1", "--fallback", "--out"]).arg(&fb));
    assert_eq!(code(&res), 0);
    let v = read_json(&fb);
    assert_eq!(v["fallback_used"], true);
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
}

fn fitted_beta(dir: &Path) -> PathBuf {
    let beta = dir.join("beta.json");
    let res = run(bin().arg("fit").arg(sample()).arg("--out").arg(&beta));
    assert_eq!(code(&res), 0);
    beta
}

#[test]
fn ci_intervals_are_symmetric_and_one_based() {
    let dir = tempfile::tempdir().unwrap();
    let beta = fitted_beta(dir.path());
    let out = dir.path().join("ci.json");
    let res = run(bin().arg("ci").arg(sample()).arg("--beta").arg(&beta).args(["--J", "1,2", "--out"]).arg(&out));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v = read_json(&out);
    assert_eq!(v["J"], serde_json::json!([1, 2]));
    for (iv, c) in v["intervals"].as_array().unwrap().iter().zip(v["centers"].as_array().unwrap()) {
        let (lo, hi, c) = (iv[0].as_f64().unwrap(), iv[1].as_f64().unwrap(), c.as_f64().unwrap());
        assert!(lo < c && c < hi);
        assert!(((c - lo) - (hi - c)).abs() < 1e-12);
    }

    let res = run(bin().arg("ci").arg(sample()).arg("--beta").arg(&beta).args(["--J", "0", "--out"]).arg(&out));
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("1-based"));

    let res = run(bin().arg("ci").arg(sample()).arg("--beta").arg(&beta).args(["--J", "1", "--alpha", "1.5", "--out"]).arg(&out));
    assert_eq!(code(&res), 1);
}

#[test]
fn debias_reports_one_step_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let beta = fitted_beta(dir.path());
    let out = dir.path().join("debias.json");
    let theta = dir.path().join("theta.csv");
    let res = run(bin()
        .arg("debias")
        .arg(sample())
        .arg("--beta")
        .arg(&beta)
        .args(["--score", "gaussian", "--out"])
        .arg(&out)
        .arg("--theta-out")
        .arg(&theta));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("b_psi"));
    assert_eq!(std::fs::read_to_string(&theta).unwrap().lines().count(), 5);
}

#[test]
fn config_file_is_strict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let cfg = dir.path().join("cfg.json");

    std::fs::write(&cfg, r#"{"schema": 1, "fit": {"tau": 0.5, "bogus": 1}}"#).unwrap();
    let res = run(bin().arg("fit").arg(sample()).arg("--config").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code(&res), 1);

    std::fs::write(&cfg, r#"{"schema": 2}"#).unwrap();
    let res = run(bin().arg("fit").arg(sample()).arg("--config").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code(&res), 1);

    std::fs::write(&cfg, r#"{"schema": 1, "fit": {"tau": 0.5}}"#).unwrap();
    let res = run(bin().arg("fit").arg(sample()).arg("--config").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code(&res), 0);
    let manifest = read_json(&dir.path().join("fit.manifest.json"));
    assert_eq!(manifest["invocation"]["tau"], 0.5);
}

#[test]
fn simulate_rejects_unknown_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(bin().args(["simulate", "--scenario", "fig9", "--out-dir"]).arg(dir.path()));
    assert_eq!(code(&res), 1);
}

#[test]
fn replay_reproduces_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let res = run(bin()
        .args(["simulate", "--scenario", "coverage", "--trials", "5", "--seed", "9", "--out-dir"])
        .arg(&first));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = first.join("coverage_seed9_manifest.json");
    assert!(manifest.exists());

    let second = dir.path().join("second");
    let res = run(bin().arg("replay").arg(&manifest).arg("--out-dir").arg(&second));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let a = std::fs::read(first.join("coverage_seed9.csv")).unwrap();
    let b = std::fs::read(second.join("coverage_seed9.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn check_passes_and_prints_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(bin().args(["check", "--mc-trials", "200", "--out-dir"]).arg(dir.path()));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("1.5"));
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("check_report.json").exists());
}
