use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn conelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conelab"))
        .args(args)
        .env_remove("CONELAB_THREADS")
        .output()
        .expect("binary runs")
}

fn report(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn problem(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("problems")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn cone_analyze_reports_kappa() {
    let r = report(&conelab(&["cone", "analyze", "--kind", "garding", "--n", "4", "--k", "2"]));
    assert_eq!(r["kappa"], 2);
    assert_eq!(r["is_type2"], false);
    let r = report(&conelab(&["cone", "analyze", "--kind", "garding", "--n", "4", "--k", "4"]));
    assert_eq!(r["kappa"], 0);
    let r = report(&conelab(&["cone", "analyze", "--kind", "garding", "--n", "4", "--k", "1"]));
    assert_eq!(r["is_type2"], true);
}

#[test]
fn bad_inputs_exit_with_two() {
    let out = conelab(&["cone", "analyze", "--kind", "bogus", "--n", "4"]);
    assert_eq!(out.status.code(), Some(2));
    let out = conelab(&["transform", "plan", "--alpha", "1", "--tau", "1.5", "--n", "3", "--cone", "garding:2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("α = 1"));
    let out = conelab(&["solve", "radial", "--problem", "/nonexistent/problem.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = conelab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transform_plan_echoes_constants() {
    let r = report(&conelab(&["transform", "plan", "--alpha", "1", "--tau", "3", "--n", "3", "--cone", "garding:2"]));
    let d = &r["derived"];
    assert_eq!(d["kappa"], 1);
    assert_eq!(d["rho"], 0.5);
    assert!((d["rhs_const"].as_f64().unwrap() - 0.2).abs() < 1e-15);
    assert!((d["rate_const"].as_f64().unwrap() - 2.5).abs() < 1e-15);
}

#[test]
fn ellipticity_of_sigma1_is_one_over_n() {
    let r = report(&conelab(&["ellipticity", "--n", "3", "--k", "1", "--samples", "500"]));
    let ratio = r["partial"]["min_ratio"].as_f64().unwrap();
    assert!((ratio - 1.0 / 3.0).abs() < 1e-12, "{ratio}");
}

#[test]
fn ellipticity_of_transformed_sigma2() {
    let r = report(&conelab(&[
        "ellipticity", "--n", "3", "--k", "2", "--root", "--rho", "-1", "--samples", "2000",
    ]));
    let full = &r["fully_uniform"];
    assert_eq!(full["theta"], 0.25);
    assert!(full["min_ratio"].as_f64().unwrap() >= 0.25 - 1e-9);
    assert!(r["sharpness"]["sequence"].as_array().is_some_and(|s| !s.is_empty()));
}

#[test]
fn loewner_nirenberg_rate_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let r = report(&conelab(&[
        "solve", "radial", "--problem", &problem("loewner_nirenberg.json"), "--out", &out_dir,
    ]));
    let rate = r["rate"]["estimate"].as_f64().unwrap();
    assert!((rate - 0.5 * 6f64.ln()).abs() < 1e-2, "{rate}");
    for name in ["report.json", "profile.csv", "rate.svg"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let on_disk: Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, r);
}

#[test]
fn reports_are_identical_across_thread_counts() {
    for backend in ["radial", "fd"] {
        let p = problem("sigma2_ball_finite.json");
        let one = conelab(&["--threads", "1", "solve", backend, "--problem", &p]);
        let three = conelab(&["--threads", "3", "solve", backend, "--problem", &p]);
        let _ = report(&one);
        assert_eq!(one.stdout, three.stdout, "{backend}");
    }
}

#[test]
fn fd_solve_writes_vtk() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let r = report(&conelab(&[
        "solve", "fd", "--problem", &problem("sigma2_ball_finite.json"), "--grid", "13", "--out", &out_dir,
    ]));
    assert_eq!(r["solver"], "fd");
    let vtk = std::fs::read_to_string(dir.path().join("solution.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version"));
    assert!(vtk.contains("DIMENSIONS 13 13 13"));
}

#[test]
fn verify_fast_is_green() {
    let r = report(&conelab(&["verify", "--fast"]));
    assert_eq!(r["passed"], true);
    assert_eq!(r["verify"]["reproducibility"]["same_seed_identical"], true);
}
