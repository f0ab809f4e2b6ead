use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fos::io;
use fos::pipeline::Manifest;

const SMALL: &str = r#"{"seed": 4, "out_dir": "run",
 "simulate": {"n": 12, "template": {"resolution": 5}},
 "register_fun": {"demons": {"max_iterations": 3}},
 "fpca_geo": {"components": 3}, "fpca_fun": {"components": 2, "folds": 3}}"#;

fn fos(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fos")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn small_run(dir: &Path) -> Manifest {
    fs::write(dir.join("cfg.json"), SMALL).unwrap();
    ok(&fos(&["pipeline", "--config", "cfg.json"], dir));
    Manifest::load(&dir.join("run/manifest.json")).unwrap()
}

fn artifacts(m: &Manifest) -> Vec<PathBuf> {
    m.stages.iter().flat_map(|r| r.artifacts.clone()).collect()
}

#[test]
fn pipeline_is_deterministic_and_resumes_bit_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb) = (small_run(a.path()), small_run(b.path()));
    assert_eq!(ma.parameter_hash, mb.parameter_hash);
    assert_eq!(artifacts(&ma), artifacts(&mb));
    assert!(ma.failed_stage.is_none());
    for p in artifacts(&ma) {
        assert_eq!(fs::read(a.path().join("run").join(&p)).unwrap(), fs::read(b.path().join("run").join(&p)).unwrap(), "{}", p.display());
    }

    let downstream: Vec<PathBuf> = ma.stages.iter().filter(|r| r.stage >= fos::config::Stage::FpcaGeo).flat_map(|r| r.artifacts.clone()).collect();
    let before: Vec<Vec<u8>> = downstream.iter().map(|p| fs::read(a.path().join("run").join(p)).unwrap()).collect();
    for p in &downstream {
        fs::remove_file(a.path().join("run").join(p)).unwrap();
    }
    ok(&fos(&["pipeline", "--config", "cfg.json", "--from", "fpca-geo"], a.path()));
    for (p, old) in downstream.iter().zip(before) {
        assert_eq!(fs::read(a.path().join("run").join(p)).unwrap(), old, "{}", p.display());
    }
    let resumed = Manifest::load(&a.path().join("run/manifest.json")).unwrap();
    assert_eq!(artifacts(&resumed), artifacts(&ma));
}

#[test]
fn invalid_config_stops_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"out_dir": "run", "fpca_fun": {"lambda": -1.0}}"#;
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let out = fos(&["pipeline", "--config", "cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fpca_fun.lambda"));
    assert!(!dir.path().join("run").exists());

    fs::write(dir.path().join("cfg.json"), r#"{"out_dir": "run", "unknown": 1}"#).unwrap();
    assert_eq!(fos(&["pipeline", "--config", "cfg.json"], dir.path()).status.code(), Some(2));
    assert_eq!(fos(&["covary", "--grid", "1:2", "--template", "t.off", "--fpca-geo", "g", "--fpca-fun", "f", "--cca", "c", "--out", "o"], dir.path()).status.code(), Some(2));
}

#[test]
fn failing_stage_is_named_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let out = fos(&["pipeline", "--config", "cfg.json", "--from", "register-fun"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `register-fun` failed"));
    let m = Manifest::load(&dir.path().join("run/manifest.json")).unwrap();
    assert_eq!(m.failed_stage, Some(fos::config::Stage::RegisterFun));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let g: String = (0..10).fold("pc1,pc2\n".into(), |s, i| s + &format!("{i},{}\n", 2 * i));
    let f: String = (0..10).fold("pc1\n".into(), |s, i| s + &format!("{}\n", (i * i) % 7));
    fs::write(dir.path().join("g.csv"), g).unwrap();
    fs::write(dir.path().join("f.csv"), f).unwrap();
    let out = fos(&["cca", "--geo", "g.csv", "--fun", "f.csv", "--out", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometric"));
}

fn displacement(a: &fos_core::mesh::TriangleMesh, b: &fos_core::mesh::TriangleMesh) -> Vec<f64> {
    a.vertices().iter().zip(b.vertices()).flat_map(|(p, q)| (q - p).iter().copied().collect::<Vec<_>>()).collect()
}

#[test]
fn mode_visualizations() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let d = dir.path();
    let template = io::read_mesh(&d.join("run/simulate/template.off")).unwrap();
    let args = |grid: &str, out: &str| -> Vec<String> {
        ["viz-mode", "--template", "run/simulate/template.off", "--fpca-geo", "run/fpca-geo", "--grid", grid, "--out", out].iter().map(|s| s.to_string()).collect()
    };
    let run = |grid: &str, out: &str| ok(&fos(&args(grid, out).iter().map(|s| s.as_str()).collect::<Vec<_>>(), d));

    run("0:0:1", "zero");
    let m0 = io::read_mesh(&d.join("zero/frame_000.off")).unwrap();
    assert_eq!(m0.vertices(), template.vertices());
    assert!(io::read_field(&d.join("zero/frame_000.csv")).unwrap().iter().all(|v| *v == 0.0));

    run("-1:1:2", "ends");
    let lo = displacement(&template, &io::read_mesh(&d.join("ends/frame_000.off")).unwrap());
    let hi = displacement(&template, &io::read_mesh(&d.join("ends/frame_001.off")).unwrap());
    let dot: f64 = lo.iter().zip(&hi).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (norm(&lo) * norm(&hi)) <= -0.9);

    run("-2:2:9", "grid");
    let frames: Vec<_> = (0..9).map(|i| io::read_mesh(&d.join(format!("grid/frame_{i:03}.off"))).unwrap()).collect();
    let dist = |i: usize, j: usize| norm(&displacement(&frames[i], &frames[j]));
    for i in 0..9 {
        for j in i + 1..8 {
            assert!(dist(i, j + 1) > dist(i, j));
        }
        for j in (1..i).rev() {
            assert!(dist(i, j - 1) > dist(i, j));
        }
    }

    let out = fos(&["covary", "--template", "run/simulate/template.off", "--fpca-geo", "run/fpca-geo", "--fpca-fun", "run/fpca-fun", "--cca", "run/cca/cca.json", "--mode", "1", "--grid", "-3:3:7", "--out", "cov"], d);
    ok(&out);
    let idx: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cov/frames.json")).unwrap()).unwrap();
    let kept = idx["c"].as_array().unwrap().len();
    assert_eq!(kept + idx["dropped"].as_array().unwrap().len(), 7);
    assert!(d.join(format!("cov/frame_{:03}.off", kept - 1)).exists());
}

#[test]
fn sphere_benchmark_writes_trace_and_fem_dump() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fos(&["register-fun", "--emit-sphere-benchmark", "--level", "2", "--dump-fem", "--out", "b"], dir.path()));
    for f in ["sphere.off", "moving.csv", "fixed.csv", "trace.json", "fem/r0.txt", "fem/r1.txt", "fem/theta2.txt"] {
        assert!(dir.path().join("b").join(f).exists(), "{f}");
    }
}

#[test]
fn malformed_mesh_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.off"), "OFF\n3 1 0\n0 0 0\n1 0 x\n0 1 0\n3 0 1 2\n").unwrap();
    let out = fos(&["register-geo", "--template", "t.off", "--target", "t.off", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t.off:4"));
}
