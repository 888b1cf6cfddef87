//! End-to-end runs of the `pdflow` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn pdflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("PDFLOW_OUT")
        .output()
        .expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn base() -> Value {
    json!({
        "problem": {"builtin": "P1"},
        "damping": {"family": "power_law", "alpha": 4.0, "r": 1.0, "t0": 1.0},
        "coupling": {"kind": "reciprocal_gamma", "beta0": 0.6},
        "beta": 0.25,
        "horizon": 100.0
    })
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn run_writes_outputs_and_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "run.json", &base());
    let o = pdflow(dir.path(), &["--out", "out", "run", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,"));
    assert_eq!(csv.lines().count(), 201);
    let rates = fs::read_to_string(out.join("rates.csv")).unwrap();
    assert!(rates.starts_with("quantity,basis,window_lo,window_hi,fitted,theoretical,pass"));
    let audit: Value =
        serde_json::from_str(&fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["pass"], json!(true));
    assert_eq!(audit["monotone"], json!(true));
    assert_eq!(audit["seed"], json!(0x5EED));
    for key in [
        "regime",
        "identity_residuals",
        "rates",
        "saddle_inequality",
        "energy",
    ] {
        assert!(audit.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "run.json", &base());
    assert_eq!(code(&pdflow(dir.path(), &["--out", "a", "run", &cfg])), 0);
    assert_eq!(code(&pdflow(dir.path(), &["--out", "b", "run", &cfg])), 0);
    for f in ["trajectory.csv", "audit.json", "rates.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn output_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "run.json", &base());
    let o = Command::new(env!("CARGO_BIN_EXE_pdflow"))
        .args(["run", &cfg])
        .current_dir(dir.path())
        .env("PDFLOW_OUT", dir.path().join("env_out"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("env_out/trajectory.csv").exists());
    assert!(!dir.path().join("pdflow_out").exists());
}

#[test]
fn invalid_linear_coupling_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut v = base();
    v["damping"] = json!({"family": "power_law", "alpha": 4.0, "r": -0.5, "t0": 1.0});
    v["coupling"] = json!({"kind": "linear_in_t", "r0": 0.2});
    v.as_object_mut().unwrap().remove("beta");
    let cfg = write_cfg(dir.path(), "bad.json", &v);
    let o = pdflow(dir.path(), &["--out", "out", "run", &cfg]);
    assert_eq!(code(&o), 3);
    assert!(!dir.path().join("out/trajectory.csv").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("broken.json");
    fs::write(&p, "{ \"problem\": ").unwrap();
    assert_eq!(code(&pdflow(dir.path(), &["run", p.to_str().unwrap()])), 2);

    let mut v = base();
    v["colour"] = json!("blue");
    let cfg = write_cfg(dir.path(), "unknown.json", &v);
    assert_eq!(code(&pdflow(dir.path(), &["check", &cfg])), 2);

    assert_eq!(code(&pdflow(dir.path(), &["run", "missing.json"])), 2);
    assert_eq!(code(&pdflow(dir.path(), &["frobnicate"])), 2);

    let cfg = write_cfg(dir.path(), "ok.json", &base());
    let o = pdflow(dir.path(), &["--tol-scale", "0", "run", &cfg]);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_reports_regime_and_suggests_beta() {
    let dir = TempDir::new().unwrap();
    let mut v = base();
    v["beta"] = json!(1.0 / 3.0);
    let cfg = write_cfg(dir.path(), "beta.json", &v);
    let o = pdflow(dir.path(), &["check", &cfg]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("0.25"));

    let cfg = write_cfg(dir.path(), "good.json", &base());
    let o = pdflow(dir.path(), &["check", &cfg]);
    assert_eq!(code(&o), 0);
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["t1"], json!(1.0));
    assert!(rep["theoretical_rates"].is_object());

    let mut v = base();
    v["damping"] = json!({"family": "log_power", "r": 1.0, "t0": 2.0});
    v.as_object_mut().unwrap().remove("beta");
    let cfg = write_cfg(dir.path(), "log.json", &v);
    assert_eq!(code(&pdflow(dir.path(), &["check", &cfg])), 3);

    let mut v = base();
    v["damping"] = json!({"family": "power_law", "alpha": 4.0, "r": -0.5, "t0": 1.0});
    v["coupling"] = json!({"kind": "linear_in_t", "r0": 1.0});
    v.as_object_mut().unwrap().remove("beta");
    let cfg = write_cfg(dir.path(), "neg.json", &v);
    let o = pdflow(dir.path(), &["check", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rep["t1"].as_f64().unwrap() >= 1.0);
}

#[test]
fn check_flags_divergent_perturbation() {
    let dir = TempDir::new().unwrap();
    let mut v = base();
    v["perturbation"] = json!({"family": "power", "c": 1.0, "q": 3.0});
    let cfg = write_cfg(dir.path(), "fine.json", &v);
    let o = pdflow(dir.path(), &["check", &cfg]);
    assert_eq!(code(&o), 0);
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["perturbation_budget"]["finite"], json!(true));

    v["perturbation"] = json!({"family": "power", "c": 1.0, "q": 1.0});
    let cfg = write_cfg(dir.path(), "slow.json", &v);
    assert_eq!(code(&pdflow(dir.path(), &["check", &cfg])), 3);
}

#[test]
fn blow_up_exits_four_with_partial_trajectory() {
    let dir = TempDir::new().unwrap();
    let mut v = base();
    v["initial"] = json!({"x": [1e300, -1e300], "vx": [1e300, 1e300]});
    v["integrator"] = json!({"method": {"method": "rk4_fixed", "h": 0.5}});
    let cfg = write_cfg(dir.path(), "boom.json", &v);
    let o = pdflow(dir.path(), &["--out", "out", "run", &cfg]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/trajectory.csv").exists());
}

fn sweep_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("out/sweep.csv"))
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn sweep_over_alpha() {
    let dir = TempDir::new().unwrap();
    let mut b = base();
    b["coupling"] = json!({"kind": "reciprocal_gamma", "beta0": 2.0 / 3.0});
    b.as_object_mut().unwrap().remove("beta");
    b["horizon"] = json!(60.0);
    let cfg = write_cfg(
        dir.path(),
        "sweep.json",
        &json!({"base": b, "grid": {"alpha": [1.0, 2.0, 3.0, 4.0, 6.0]}}),
    );
    let o = pdflow(dir.path(), &["--out", "out", "--jobs", "2", "sweep", &cfg]);
    let rows = sweep_rows(dir.path());
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("cell,alpha,regime,exit_code,gap_fitted"));
    let codes: Vec<i32> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(code(&o), *codes.iter().max().unwrap());
    assert!(codes.iter().all(|c| *c <= 1), "{rows:?}");
}

#[test]
fn sweep_over_power_exponent() {
    let dir = TempDir::new().unwrap();
    let mut b = base();
    b["damping"] = json!({"family": "power_law", "alpha": 4.0, "r": 0.0, "t0": 1.0});
    b["coupling"] = json!({"kind": "linear_in_t", "r0": 1.0});
    b.as_object_mut().unwrap().remove("beta");
    b["horizon"] = json!(40.0);
    let cfg = write_cfg(
        dir.path(),
        "sweep.json",
        &json!({"base": b, "grid": {"r": [-0.5, 0.0, 0.5]}}),
    );
    pdflow(dir.path(), &["--out", "out", "sweep", &cfg]);
    let rows = sweep_rows(dir.path());
    assert_eq!(rows.len(), 4);
    assert!(rows[1].contains(",power_neg,"), "{rows:?}");
    assert!(rows[3].contains(",power_pos,"), "{rows:?}");
}

#[test]
fn empty_grid_is_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "sweep.json",
        &json!({"base": base(), "grid": {}}),
    );
    assert_eq!(code(&pdflow(dir.path(), &["sweep", &cfg])), 2);
    let cfg = write_cfg(
        dir.path(),
        "sweep2.json",
        &json!({"base": base(), "grid": {"alpha": []}}),
    );
    assert_eq!(code(&pdflow(dir.path(), &["sweep", &cfg])), 2);
}
