use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pomega_core::analysis::{weighted_mean_tau, FitOptions, Model};
use pomega_core::pipeline::{fit_summary, read_summary};
use serde_json::Value;

fn pomega(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pomega"))
        .current_dir(dir)
        .env_remove("POMEGA_CONFIG")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = pomega(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON summary")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn synth_million_records_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["synth", "--state", "coherent", "--alpha", "3", "--n", "1e6", "--seed", "7", "--out", "a.csv", "--json"];
    let summary = json(&ok(d, &args));
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["files"][0]["records"], 1_000_000);
    let text = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 1_000_001);
    assert!(text.starts_with("t_index,X1,X2,X3,dphi\n"));
    let mut again = args;
    again[10] = "b.csv";
    ok(d, &again);
    assert!(std::fs::read(d.join("a.csv")).unwrap() == std::fs::read(d.join("b.csv")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(pomega(d, &["synth", "--n", "0"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["synth", "--n", "1.5"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["frobnicate"]).status.code(), Some(2));
    std::fs::write(d.join("bad.toml"), "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(pomega(d, &["--config", "bad.toml", "synth"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["--config", "missing.toml", "synth"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["synth", "--state", "thermal", "--nbar", "-1"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["reconstruct"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["simulate", "--trajectories", "1"]).status.code(), Some(2));
    assert_eq!(pomega(d, &["fit", "--series", "x.csv", "--models", "cubic"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(pomega(d, &["reconstruct", "absent.csv", "--tau", "0"]).status.code(), Some(1));
    std::fs::write(d.join("junk.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(pomega(d, &["fit", "--series", "junk.csv"]).status.code(), Some(1));
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "seed = 99\n[synth]\nn = 10\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pomega"))
        .current_dir(d)
        .env("POMEGA_CONFIG", d.join("c.toml"))
        .args(["synth", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let s = json(&out);
    assert_eq!(s["seed"], 99);
    assert_eq!(s["files"][0]["records"], 10);
}

#[test]
fn reconstruct_coherent_and_flag_empty_annulus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--state", "coherent", "--alpha", "3", "--n", "3e5", "--out", "r.csv"]);
    let before = std::fs::read(d.join("r.csv")).unwrap();
    let s = json(&ok(d, &["--out-dir", "out", "reconstruct", "r.csv", "--tau", "0", "--s", "6,60", "--json"]));
    assert_eq!(s["empty_rows"], 1);
    assert!(std::fs::read(d.join("r.csv")).unwrap() == before, "input mutated");
    let rows = read_summary(std::fs::File::open(d.join("out/summary.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    let near = &rows[0];
    assert!(near.n_kept > 0 && near.var_phi.unwrap() < 0.5, "{near:?}");
    assert!(rows[1].is_empty() && rows[1].n_kept == 0);
    let head = std::fs::read_to_string(d.join("out/summary.csv")).unwrap();
    assert_eq!(head.lines().next(), Some("s,tau_ps,var_phi,var_phi_err,mean_amp,mean_amp_err,n_kept"));
    assert!(d.join("out/field_s6_tau0.csv").exists() && d.join("out/field_s6_tau0.json").exists());
    assert!(!d.join("out/field_s60_tau0.csv").exists());
}

fn run_golden_pipeline(d: &Path) {
    let cfg = golden("pipeline.toml");
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "--out-dir", "g", "synth"]);
    let files: Vec<String> = [0, 150, 300, 600, 1200, 2400].iter().map(|t| format!("g/records_tau{t}.csv")).collect();
    let mut args = vec!["--config", cfg, "--out-dir", "g", "reconstruct", "--no-fields"];
    args.extend(files.iter().map(String::as_str));
    ok(d, &args);
    ok(d, &["--config", cfg, "--out-dir", "g", "fit", "--summary", "g/summary.csv", "--gnuplot"]);
}

#[test]
fn golden_pipeline_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_golden_pipeline(d);
    let got = std::fs::read_to_string(d.join("g/summary.csv")).unwrap();
    let want = std::fs::read_to_string(golden("summary.csv")).unwrap();
    assert!(got == want, "summary differs from archive:\n{got}");
    let got = std::fs::read_to_string(d.join("g/fits.csv")).unwrap();
    assert_eq!(got, std::fs::read_to_string(golden("fits.csv")).unwrap());
    assert!(d.join("g/fits.gp").exists());
}

#[test]
fn weighted_flag_delegates_to_weighted_mean() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let summary = golden("summary.csv");
    let s = json(&ok(d, &["fit", "--summary", summary.to_str().unwrap(), "--weighted", "--models", "exponential", "--json"]));
    let reported = s["weighted"][0]["tau_mean"].as_f64().unwrap();
    let rows = read_summary(std::fs::File::open(&summary).unwrap()).unwrap();
    let fits = fit_summary(&rows, 1.0, &[Model::Exponential], &FitOptions::default());
    let (mut results, mut weights) = (Vec::new(), Vec::new());
    for (row, fit) in fits {
        if let Some(f) = fit {
            let s = row.s.unwrap();
            weights.push(rows.iter().filter(|r| r.s == s && !r.is_empty()).map(|r| r.n_kept as f64).sum());
            results.push(f);
        }
    }
    let want = weighted_mean_tau(&results, &weights).unwrap();
    assert_eq!(reported, want.tau_mean);
    assert_eq!(s["weighted"][0]["stderr"].as_f64().unwrap(), want.stderr);
}

#[test]
fn sweep_table_has_one_row_per_power_radius_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("sweep.toml"),
        "seed = 5\n[synth]\nn = 40000\ndelays_ps = [0.0, 200.0, 400.0, 800.0]\n[selection]\ns_list = [5.0, 6.0, 60.0]\n\
         [[sweep]]\npower = 0.8\ndynamics = { phase_diffusion_rate = 0.002 }\n\
         [[sweep]]\npower = 1.7\ndynamics = { phase_diffusion_rate = 0.0005 }\n",
    )
    .unwrap();
    let a = json(&ok(d, &["--config", "sweep.toml", "--out-dir", "a", "--jobs", "2", "sweep", "--weighted", "--json"]));
    assert_eq!(a["rows"], 2 * 3 * 4);
    let table = std::fs::read_to_string(d.join("a/tau_vs_s.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 3 * 4);
    assert!(d.join("a/summary_p0.8.csv").exists() && d.join("a/tau_vs_power.csv").exists());
    // idempotent and independent of the worker count
    ok(d, &["--config", "sweep.toml", "--out-dir", "b", "--jobs", "1", "sweep", "--weighted"]);
    for f in ["tau_vs_s.csv", "tau_vs_power.csv", "summary_p1.7.csv"] {
        assert!(std::fs::read(d.join("a").join(f)).unwrap() == std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_smoke_run_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    let s = json(&ok(
        d,
        &["simulate", "--grid", "64", "--trajectories", "20", "--t-settle", "0", "--t-obs", "100", "--points", "5", "--p-thr", "7.5", "--powers", "1.0", "--json"],
    ));
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "{secs} s");
    assert_eq!(s["p_thr"], 7.5);
    let series = std::fs::read_to_string(d.join("out/series_p1.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 6);
    let first: Vec<&str> = series.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert!(first[1].parse::<f64>().unwrap().abs() < 1e-12, "aligned start: {first:?}");
}

#[test]
fn checkpoint_resume_reproduces_series() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = ["--trajectories", "6", "--t-settle", "20", "--t-obs", "60", "--points", "4"];
    let mut first = vec!["simulate", "--grid", "16", "--p-thr", "7.5", "--powers", "1.2", "--checkpoint"];
    first.extend(run);
    ok(d, &first);
    let mut resume = vec!["--out-dir", "again", "simulate", "--resume", "out/checkpoints/p0"];
    resume.extend(run);
    ok(d, &resume);
    let a = std::fs::read_to_string(d.join("out/series_p1.2.csv")).unwrap();
    let b = std::fs::read_to_string(d.join("again/series_resumed.csv")).unwrap();
    assert_eq!(a, b);
}
