use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nanotherm::physics::sigma_from_beta_radius;
use nanotherm::pipeline::{emit_ensemble, ingest_ensemble, parse_esr, parse_heating_table, ExperimentConfig};
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nanotherm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1));
    serde_json::from_slice(&out.stderr).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = cli(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert!(out.stdout.is_empty());
}

#[test]
fn help_exits_cleanly() {
    let out = cli(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["esr-fit", "psd-fit", "calibrate", "heating-fit", "particle", "ensemble", "synth", "sensitivity"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn sensitivity_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("s.txt");
    fs::write(&params, "linewidth_hz = 10e6\ncontrast = 0.07\ncount_rate_hz = 2e5\ndwell_s = 1.5\nslope_hz_k = -74e3\n").unwrap();
    let v = stdout_json(&cli(&["sensitivity", path(&params)]));
    let eta = v["sensitivity_k_per_sqrt_hz"].as_f64().unwrap();
    let oracle = 10e6 / (0.07 * 2e5f64.sqrt() * 74e3);
    assert!((eta / oracle - 1.0).abs() < 1e-12);
    assert!((eta - 4.32).abs() < 0.005);
}

#[test]
fn ingestion_errors_carry_locations() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("# dwell_s=1\nfrequency_hz,counts\n2.86e9,100\n2.85e9,100\n2.87e9,100\n", 4),
        ("# dwell_s=1\nfrequency_hz,counts\n2.86e9,100\n2.87e9,-3\n2.88e9,100\n", 4),
        ("# dwell_s=1\nfrequency_hz,counts\n2.86e9,100\n2.87e9,abc\n", 4),
    ];
    for (i, (text, line)) in cases.iter().enumerate() {
        let file = dir.path().join(format!("bad{i}.csv"));
        fs::write(&file, text).unwrap();
        let v = stderr_json(&cli(&["esr-fit", path(&file)]));
        assert_eq!(v["error"]["stage"], "ingest", "{v}");
        assert_eq!(v["error"]["line"].as_u64(), Some(*line as u64), "{v}");
        assert!(v["error"]["file"].as_str().unwrap().ends_with(&format!("bad{i}.csv")));
    }
}

#[test]
fn too_short_spectrum_fails_in_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("two.csv");
    fs::write(&file, "# dwell_s=1\nfrequency_hz,counts\n2.86e9,100\n2.87e9,90\n").unwrap();
    assert!(parse_esr(&fs::read_to_string(&file).unwrap()).is_ok());
    let v = stderr_json(&cli(&["esr-fit", path(&file)]));
    assert_eq!(v["error"]["stage"], "esr_fit");
}

#[test]
fn unknown_config_key_is_rejected_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("x.conf");
    fs::write(&conf, "seed = 3\n\nn_particels = 10\n").unwrap();
    let v = stderr_json(&cli(&["ensemble", path(&conf), "--out-dir", path(dir.path())]));
    assert_eq!(v["error"]["stage"], "config");
    assert_eq!(v["error"]["line"].as_u64(), Some(3));
}

/// The heating-fit subcommand must recover β from a table generated with the
/// polynomial evaluated directly.
#[test]
fn heating_fit_from_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("h.csv");
    let beta = 1.2e-5;
    let cubic = |t: f64| 2.8697e9 + 9.7e4 * t - 370.0 * t * t + 0.17 * t * t * t;
    let mut text = String::from("intensity_w_m2,pressure_pa,d_hz,sigma_d_hz\n");
    for p in [2000.0, 3000.0, 5000.0] {
        for i in [1e10, 2e10, 3e10] {
            text.push_str(&format!("{i},{p},{},50000\n", cubic(294.0 + beta * i / p) + 2e5));
        }
    }
    fs::write(&table, &text).unwrap();
    assert_eq!(parse_heating_table(&text).unwrap().len(), 9);
    let v = stdout_json(&cli(&["heating-fit", path(&table)]));
    assert!((v["beta_heat"].as_f64().unwrap() / beta - 1.0).abs() < 1e-8);
    assert!((v["d_strain"].as_f64().unwrap() - 2e5).abs() < 1e-2);
}

#[test]
fn calibrate_from_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("c.csv");
    let cubic = |t: f64| 2.8697e9 + 9.7e4 * t - 370.0 * t * t + 0.17 * t * t * t;
    let mut text = String::from("t_set_k,d_hz\n");
    for t in [300.0, 350.0, 400.0, 450.0, 500.0] {
        text.push_str(&format!("{t},{}\n", cubic(0.95 * t) - 1e5));
    }
    fs::write(&table, &text).unwrap();
    let v = stdout_json(&cli(&["calibrate", path(&table)]));
    assert!((v["alpha"].as_f64().unwrap() - 0.95).abs() < 1e-8);
    assert!((v["d_strain"].as_f64().unwrap() + 1e5).abs() < 1e-2);
}

fn small_ensemble_config(dir: &Path, n: usize) -> std::path::PathBuf {
    let conf = dir.join("ens.conf");
    fs::write(&conf, format!("n_particles = {n}\nseed = 21\n")).unwrap();
    conf
}

#[test]
fn ensemble_outputs_round_trip_and_stay_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_ensemble_config(dir.path(), 8);
    let out_dir = dir.path().join("out");
    fs::create_dir(&out_dir).unwrap();
    let v = stdout_json(&cli(&["ensemble", path(&conf), "--out-dir", path(&out_dir)]));
    assert_eq!(v["n_requested"], 8);

    let records = ingest_ensemble(&out_dir.join("ensemble_records.csv")).unwrap();
    assert_eq!(records.len() as u64, v["n_analyzed"].as_u64().unwrap());
    assert_eq!(emit_ensemble(&records), fs::read_to_string(out_dir.join("ensemble_records.csv")).unwrap());

    let cfg = ExperimentConfig::from_file(&conf).unwrap();
    let gas = cfg.gas(cfg.psd_pressure_pa()).unwrap();
    for r in &records {
        let sigma = sigma_from_beta_radius(r.beta_heat, r.r_hydro, &gas).unwrap();
        assert!((sigma / r.sigma_abs - 1.0).abs() < 1e-10, "{}", r.particle_id);
    }

    // The report carries the fully resolved config it was produced with.
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ensemble_report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["n_particles"], 8);
    assert_eq!(report["config"]["seed"], 21);
    for f in ["beta_histogram.csv", "scatter.csv", "band.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn failed_ensemble_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_ensemble_config(dir.path(), 2);
    let out_dir = dir.path().join("out");
    fs::create_dir(&out_dir).unwrap();
    let v = stderr_json(&cli(&["ensemble", path(&conf), "--out-dir", path(&out_dir)]));
    assert_eq!(v["error"]["stage"], "power_law");
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 0);
}

#[test]
fn csv_format_switch() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("s.txt");
    fs::write(&params, "linewidth_hz = 10e6\ncontrast = 0.07\ncount_rate_hz = 2e5\ntemperature_k = 300\n").unwrap();
    let out = cli(&["--format", "csv", "sensitivity", path(&params)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sensitivity_k_per_sqrt_hz,resolution_k,slope_hz_per_k"));
    let slope: f64 = lines.next().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let oracle = 9.7e4 - 2.0 * 370.0 * 300.0 + 3.0 * 0.17 * 300.0 * 300.0;
    assert!((slope / oracle - 1.0).abs() < 1e-12);
}

#[test]
fn synth_then_psd_fit_recovers_radius() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("p.conf");
    fs::write(&conf, "synth_r_hydro_m = 90e-9\nseed = 5\n").unwrap();
    let v = stdout_json(&cli(&["synth", path(&conf), "--out-dir", path(dir.path())]));
    let truth_r = v["truth"]["r_hydro"].as_f64().unwrap();
    let psd = dir.path().join("psd.csv");
    assert!(psd.exists());
    let fit = stdout_json(&cli(&["psd-fit", path(&psd)]));
    let r = fit["r_hydro_m"].as_f64().unwrap();
    assert!((r / truth_r - 1.0).abs() < 0.03, "{r} vs {truth_r}");
}
