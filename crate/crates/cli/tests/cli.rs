use std::path::Path;
use std::process::{Command, Output};

fn cellmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellmine")).args(args).env("RUST_LOG", "warn").output().expect("spawn cellmine")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small noisy city starting on a Friday, four whole weeks.
fn synth_city(dir: &Path, seed: &str) {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, r#"{"towers": 60, "sigma": 0.1}"#).unwrap();
    let out = cellmine(&["synth", "--spec", p(&spec), "--out", p(&dir.join("city")), "--seed", seed]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn run(dir: &Path, name: &str) -> Output {
    let city = dir.join("city");
    cellmine(&[
        "run",
        "--sessions",
        p(&city.join("sessions.csv")),
        "--towers",
        p(&city.join("towers.csv")),
        "--pois",
        p(&city.join("pois.csv")),
        "--week-start",
        "friday",
        "--out",
        p(&dir.join(name)),
    ])
}

#[test]
fn synth_run_report() {
    let dir = tempfile::tempdir().unwrap();
    synth_city(dir.path(), "3");
    let out = run(dir.path(), "run");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(stages, ["ingest", "vectorize", "cluster", "features", "spectrum", "decompose", "poi"]);

    let out = cellmine(&["report", "--run", p(&dir.path().join("run"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = std::fs::read_dir(dir.path().join("run/report")).unwrap().count();
    assert_eq!(n, 9);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth_city(dir.path(), "5");
    assert!(run(dir.path(), "a").status.success());
    assert!(run(dir.path(), "b").status.success());
    let sums = |name: &str| {
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(name).join("manifest.json")).unwrap()).unwrap();
        m["stages"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|s| s["artifacts"].as_array().unwrap().clone())
            .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
            .collect::<Vec<_>>()
    };
    let a = sums("a");
    assert!(!a.is_empty());
    assert_eq!(a, sums("b"));
}

#[test]
fn missing_pois_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    synth_city(dir.path(), "1");
    std::fs::remove_file(dir.path().join("city/pois.csv")).unwrap();
    let out = run(dir.path(), "run");
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("poi stage") && err.contains("pois.csv"), "{err}");
    // without the poi stage the same inputs are fine
    let city = dir.path().join("city");
    let out = cellmine(&[
        "run",
        "--sessions",
        p(&city.join("sessions.csv")),
        "--towers",
        p(&city.join("towers.csv")),
        "--no-poi",
        "--week-start",
        "friday",
        "--out",
        p(&dir.path().join("nopoi")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cellmine(&["cluster", "--vectors", p(&dir.path().join("nope.csv"))]).status.code(), Some(1));
    assert_eq!(cellmine(&["frobnicate"]).status.code(), Some(1));
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"shares": [0.5, 0.5, 0.5, 0.0, 0.0]}"#).unwrap();
    assert_eq!(cellmine(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("c"))]).status.code(), Some(1));
    // a run directory without artifacts
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = cellmine(&["report", "--run", p(&dir.path().join("empty"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("binned.csv"));
    assert_eq!(cellmine(&["--help"]).status.code(), Some(0));
}

#[test]
fn stage_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // parses, but two towers are too few to cluster
    let vectors = dir.path().join("vectors.csv");
    std::fs::write(&vectors, "tower_id,v0,v1,v2\na,1,0,-1\nb,-1,0,1\n").unwrap();
    let out = cellmine(&["cluster", "--vectors", p(&vectors), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
