use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use super::io::{emit_ensemble, ingest_calibration_table, ingest_esr, ingest_heating_table, ingest_psd, write_atomic};
use super::particle::{run_particle, synthesize_particle, write_synthetic_particle, ParticleTruth};
use super::{run_ensemble, write_ensemble_outputs, ExperimentConfig, PipelineError, Result, SensitivityParams, Stage, StageExt};
use crate::estimation::{fit_calibration_alpha, fit_heating};
use crate::physics::{esr_sensitivity, invert_zfs, radius_from_damping, zfs_slope};
use crate::spectral::{fit_esr, fit_psd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Levitated-nanodiamond thermometry: spectrum fits, heating analysis and
/// ensemble absorption studies.
#[derive(Debug, Parser)]
#[command(name = "nanotherm", version)]
pub struct Cli {
    /// Overrides the RNG seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config file used when a subcommand takes no positional config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    /// Worker threads for ensemble runs (1 = serial).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one ESR spectrum (`frequency_hz,counts` with `# dwell_s=`).
    EsrFit { file: PathBuf },
    /// Fit one motional PSD (`frequency_hz,psd_m2_per_hz`).
    PsdFit { file: PathBuf },
    /// Fit (a0, α) to a `t_set_k,d_hz` table.
    Calibrate { table: PathBuf },
    /// Joint heating fit of an `intensity_w_m2,pressure_pa,d_hz,sigma_d_hz` table.
    HeatingFit { table: PathBuf },
    /// Analyse the spectra listed in a particle config.
    Particle { config: Option<PathBuf> },
    /// Simulate and analyse a particle ensemble.
    Ensemble { config: Option<PathBuf> },
    /// Write the spectra of one synthetic particle plus its particle config.
    Synth { config: Option<PathBuf> },
    /// Shot-noise-limited temperature sensitivity from a parameter file.
    Sensitivity { params: PathBuf },
}

struct Output {
    json: Value,
    csv: String,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).stage(Stage::Output)
}

fn load_config(cli: &Cli, positional: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match positional.or(cli.config.as_deref()) {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn param_table(rows: &[(&str, f64, Option<f64>)]) -> String {
    let mut out = String::from("parameter,value,uncertainty\n");
    for (name, v, u) in rows {
        let _ = writeln!(out, "{name},{v},{}", u.map(|x| x.to_string()).unwrap_or_default());
    }
    out
}

fn esr_fit(cli: &Cli, file: &Path) -> Result<Output> {
    let cfg = load_config(cli, None)?;
    let spec = ingest_esr(file)?;
    let fit = fit_esr(&spec, cfg.tolerances()).map_err(|e| PipelineError::new(Stage::EsrFit, e).with_file(file))?;
    let poly = cfg.polynomial().stage(Stage::Config)?;
    let temperature = invert_zfs(&poly, fit.params.d_center).ok();
    let mut json = to_value(&fit)?;
    json["temperature_k_without_strain"] = json!(temperature);
    let std = |i: usize| fit.covariance.get(i).and_then(|r| r.get(i)).map(|v| v.max(0.0).sqrt());
    let p = &fit.params;
    let values = [
        p.d_center,
        p.e_split,
        p.contrast_minus,
        p.contrast_plus,
        p.width_minus,
        p.width_plus,
        p.base_rate,
    ];
    let rows: Vec<(&str, f64, Option<f64>)> = fit
        .names
        .iter()
        .zip(values)
        .enumerate()
        .map(|(i, (n, v))| (n.as_str(), v, std(i)))
        .collect();
    Ok(Output {
        json,
        csv: param_table(&rows),
    })
}

fn psd_fit(cli: &Cli, file: &Path) -> Result<Output> {
    let cfg = load_config(cli, None)?;
    let psd = ingest_psd(file)?;
    let fit = fit_psd(&psd, cfg.tolerances()).map_err(|e| PipelineError::new(Stage::PsdFit, e).with_file(file))?;
    let gas = cfg.gas(cfg.psd_pressure_pa()).stage(Stage::Config)?;
    let r = radius_from_damping(fit.damping_gamma, &gas, cfg.density_kg_m3).stage(Stage::Radius)?;
    let r_std = r * fit.gamma_std() / fit.damping_gamma;
    let mut json = to_value(&fit)?;
    json["r_hydro_m"] = json!(r);
    json["r_hydro_uncertainty_m"] = json!(r_std);
    json["pressure_pa"] = json!(cfg.psd_pressure_pa());
    let csv = param_table(&[
        ("resonance_omega", fit.resonance_omega, Some(fit.covariance[1][1].max(0.0).sqrt())),
        ("damping_gamma", fit.damping_gamma, Some(fit.gamma_std())),
        ("amplitude", fit.amplitude, None),
        ("r_hydro_m", r, Some(r_std)),
    ]);
    Ok(Output { json, csv })
}

fn calibrate(cli: &Cli, table: &Path) -> Result<Output> {
    let cfg = load_config(cli, None)?;
    let pairs = ingest_calibration_table(table)?;
    let poly = cfg.polynomial().stage(Stage::Config)?;
    let fit = fit_calibration_alpha(&pairs, &poly, cfg.tolerances())
        .map_err(|e| PipelineError::new(Stage::Calibration, e).with_file(table))?;
    let mut csv = String::from("t_set_k,t_corrected_k\n");
    for ((t, _), tc) in pairs.iter().zip(&fit.corrected_temperatures) {
        let _ = writeln!(csv, "{t},{tc}");
    }
    Ok(Output {
        json: to_value(&fit)?,
        csv,
    })
}

fn heating_fit(cli: &Cli, table: &Path) -> Result<Output> {
    let cfg = load_config(cli, None)?;
    let points = ingest_heating_table(table)?;
    let poly = cfg.polynomial().stage(Stage::Config)?;
    let gas = cfg.gas(cfg.psd_pressure_pa()).stage(Stage::Config)?;
    let fit = fit_heating(&points, &poly, &gas, cfg.tolerances())
        .map_err(|e| PipelineError::new(Stage::HeatingFit, e).with_file(table))?;
    let mut csv = String::from("intensity_w_m2,pressure_pa,d_hz,fitted_temperature_k,residual\n");
    for ((p, t), r) in points.iter().zip(&fit.fitted_temperatures).zip(&fit.residuals) {
        let _ = writeln!(csv, "{},{},{},{t},{r}", p.intensity, p.pressure, p.d_measured);
    }
    Ok(Output {
        json: to_value(&fit)?,
        csv,
    })
}

fn particle(cli: &Cli, config: Option<&Path>) -> Result<Output> {
    let cfg = load_config(cli, config)?;
    let report = run_particle(&cfg)?;
    let mut json = to_value(&report)?;
    json["config"] = to_value(&cfg)?;
    let mut body = serde_json::to_string_pretty(&json).stage(Stage::Output)?;
    body.push('\n');
    let path = cli.out_dir.join(format!("particle_{}.json", cfg.particle_id));
    write_atomic(&path, &body)?;
    Ok(Output {
        json,
        csv: emit_ensemble(&[report.record()]),
    })
}

fn ensemble(cli: &Cli, config: Option<&Path>) -> Result<Output> {
    let cfg = load_config(cli, config)?;
    let report = run_ensemble(&cfg, cli.threads)?;
    let files = write_ensemble_outputs(&cli.out_dir, &report)?;
    let json = json!({
        "n_requested": report.n_requested,
        "n_analyzed": report.n_analyzed,
        "n_failed": report.failures.len(),
        "exponent_free": report.free.exponent,
        "exponent_free_std": report.free.exponent_std,
        "a_h": report.fixed_3.amplitude,
        "a_minus": report.fixed_3.a_minus,
        "a_plus": report.fixed_3.a_plus,
        "band_ratio": report.band_ratio,
        "preferred_fixed_exponent": report.preferred_fixed,
        "eps_imag": report.dielectric.iter().map(|d| d.eps_imag).collect::<Vec<_>>(),
        "bulk_absorption_per_m": report.dielectric.iter().map(|d| d.bulk_absorption).collect::<Vec<_>>(),
        "files": files,
    });
    Ok(Output {
        json,
        csv: emit_ensemble(&report.records),
    })
}

fn synth(cli: &Cli, config: Option<&Path>) -> Result<Output> {
    let cfg = load_config(cli, config)?;
    let truth = ParticleTruth::new(
        &cfg,
        cfg.particle_id.clone(),
        cfg.synth_r_hydro_m,
        cfg.synth_sigma_abs_m2,
        cfg.synth_d_strain_hz,
    )?;
    let particle = synthesize_particle(&cfg, truth, cfg.seed)?;
    let manifest = write_synthetic_particle(&cli.out_dir, &cfg, &particle)?;
    let json = json!({ "manifest": manifest, "truth": to_value(&particle.truth)? });
    let t = &particle.truth;
    let csv = format!(
        "particle_id,beta_heat,r_hydro_m,sigma_abs_m2,d_strain_hz,manifest\n{},{},{},{},{},{}\n",
        t.particle_id,
        t.beta_heat,
        t.r_hydro,
        t.sigma_abs,
        t.d_strain,
        manifest.display()
    );
    Ok(Output { json, csv })
}

fn sensitivity(cli: &Cli, params: &Path) -> Result<Output> {
    let cfg = load_config(cli, None)?;
    let text = std::fs::read_to_string(params)
        .map_err(|e| PipelineError::new(Stage::Ingest, e).with_file(params))?;
    let p = SensitivityParams::parse(&text).map_err(|e| e.with_file(params))?;
    let slope = match (p.slope_hz_k, p.temperature_k) {
        (Some(s), _) => s,
        (None, Some(t)) => zfs_slope(&cfg.polynomial().stage(Stage::Config)?, t).stage(Stage::Thermometry)?,
        (None, None) => unreachable!("parse requires one of the two"),
    };
    let s = esr_sensitivity(&p.inputs, slope).stage(Stage::Config)?;
    let json = json!({
        "sensitivity_k_per_sqrt_hz": s.sensitivity,
        "resolution_k": s.resolution,
        "slope_hz_per_k": slope,
        "inputs": to_value(&p.inputs)?,
    });
    let csv = format!(
        "sensitivity_k_per_sqrt_hz,resolution_k,slope_hz_per_k\n{},{},{}\n",
        s.sensitivity, s.resolution, slope
    );
    Ok(Output { json, csv })
}

fn dispatch(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Command::EsrFit { file } => esr_fit(cli, file),
        Command::PsdFit { file } => psd_fit(cli, file),
        Command::Calibrate { table } => calibrate(cli, table),
        Command::HeatingFit { table } => heating_fit(cli, table),
        Command::Particle { config } => particle(cli, config.as_deref()),
        Command::Ensemble { config } => ensemble(cli, config.as_deref()),
        Command::Synth { config } => synth(cli, config.as_deref()),
        Command::Sensitivity { params } => sensitivity(cli, params),
    }
}

/// Runs the command line and returns the process exit status: 0 on success,
/// 2 for usage errors and 1 for failures, which are reported on `err` as a
/// JSON object.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(o) => {
            let text = match cli.format {
                OutputFormat::Json => serde_json::to_string_pretty(&o.json).unwrap_or_default() + "\n",
                OutputFormat::Csv => o.csv,
            };
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            let body = json!({ "error": e, "message": e.to_string() });
            let _ = writeln!(err, "{}", serde_json::to_string_pretty(&body).unwrap_or_default());
            1
        }
    }
}
