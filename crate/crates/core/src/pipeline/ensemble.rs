use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::io::{emit_ensemble, write_atomic, EnsembleRecord};
use super::particle::{analyze_particle, synthesize_particle, ParticleTruth};
use super::{ExperimentConfig, PipelineError, Result, Stage, StageExt};
use crate::estimation::{compare_exponents, PowerLawFit};
use crate::physics::{bulk_absorption_coefficient, epsilon_imag_from_sigma_ratio, DielectricConstant};

/// Stream for particle `index` of a run seeded with `seed`. Independent of
/// scheduling, so serial and parallel runs agree.
fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Seed of task `index` in a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    particle_rng(seed, index).next_u64()
}

/// Draws the simulated particles: log-uniform radii, log-normal scatter of
/// σ around a_h·r³ and a Gaussian strain offset. Returns each truth with the
/// seed for its spectra.
pub fn synthesize_truths(cfg: &ExperimentConfig) -> Result<Vec<(ParticleTruth, u64)>> {
    let (ln_lo, ln_hi) = (cfg.radius_min_m.ln(), cfg.radius_max_m.ln());
    (0..cfg.n_particles)
        .map(|i| {
            let mut rng = particle_rng(cfg.seed, i);
            let r = (ln_lo + rng.random::<f64>() * (ln_hi - ln_lo)).exp();
            let z: f64 = rng.sample(StandardNormal);
            let sigma = cfg.a_h_true * r.powi(3) * (cfg.sigma_log * z).exp();
            let strain: f64 = cfg.d_strain_spread_hz * rng.sample::<f64, _>(StandardNormal);
            let truth = ParticleTruth::new(cfg, format!("p{i:03}"), r, sigma, strain)?;
            Ok((truth, rng.next_u64()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleFailure {
    pub particle_id: String,
    pub error: PipelineError,
}

/// ε″ and the bulk absorption implied by one amplitude of the cubic fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DielectricEstimate {
    pub amplitude: f64,
    /// σ/V = a/(4π/3) for n = 3.
    pub sigma_over_volume: f64,
    pub eps_imag: Option<f64>,
    /// m⁻¹.
    pub bulk_absorption: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub config: ExperimentConfig,
    pub n_requested: usize,
    pub n_analyzed: usize,
    pub failures: Vec<ParticleFailure>,
    pub truths: Vec<ParticleTruth>,
    pub records: Vec<EnsembleRecord>,
    pub free: PowerLawFit,
    pub fixed_2: PowerLawFit,
    pub fixed_3: PowerLawFit,
    pub preferred_fixed: u8,
    /// a₊/a of the n = 3 fit.
    pub band_ratio: f64,
    /// Band of the n = 3 fit: (a₋, a, a₊).
    pub dielectric: [DielectricEstimate; 3],
}

fn dielectric(cfg: &ExperimentConfig, amplitude: f64) -> DielectricEstimate {
    let sigma_over_volume = amplitude / (4.0 / 3.0 * std::f64::consts::PI);
    let solved = epsilon_imag_from_sigma_ratio(sigma_over_volume, cfg.eps_real, cfg.wavelength_m).and_then(|e| {
        let eps = DielectricConstant::new(cfg.eps_real, e)?;
        Ok((e, bulk_absorption_coefficient(&eps, cfg.wavelength_m)?))
    });
    match solved {
        Ok((e, k)) => DielectricEstimate {
            amplitude,
            sigma_over_volume,
            eps_imag: Some(e),
            bulk_absorption: Some(k),
            note: None,
        },
        Err(e) => DielectricEstimate {
            amplitude,
            sigma_over_volume,
            eps_imag: None,
            bulk_absorption: None,
            note: Some(e.to_string()),
        },
    }
}

/// Simulates and analyses every particle, then fits the size scaling of
/// the absorption cross-section. `threads = Some(1)` runs serially.
pub fn run_ensemble(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<EnsembleReport> {
    cfg.validate()?;
    let truths = synthesize_truths(cfg)?;
    let work = || -> Vec<Result<super::ParticleReport>> {
        truths
            .par_iter()
            .map(|(truth, seed)| {
                let synth = synthesize_particle(cfg, truth.clone(), *seed)?;
                analyze_particle(cfg, &truth.particle_id, &synth.conditions, &synth.psd, None)
            })
            .collect()
    };
    let outcomes = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .stage(Stage::Config)?
            .install(work),
        None => work(),
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((truth, _), outcome) in truths.iter().zip(outcomes) {
        match outcome {
            Ok(report) => records.push(report.record()),
            Err(error) => failures.push(ParticleFailure {
                particle_id: truth.particle_id.clone(),
                error,
            }),
        }
    }
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.r_hydro, r.sigma_abs)).collect();
    let cmp = compare_exponents(&pairs).stage(Stage::PowerLaw)?;
    let a = cmp.fixed_3.amplitude;
    Ok(EnsembleReport {
        config: cfg.clone(),
        n_requested: cfg.n_particles,
        n_analyzed: records.len(),
        failures,
        truths: truths.into_iter().map(|(t, _)| t).collect(),
        records,
        band_ratio: cmp.fixed_3.a_plus / a,
        dielectric: [
            dielectric(cfg, cmp.fixed_3.a_minus),
            dielectric(cfg, a),
            dielectric(cfg, cmp.fixed_3.a_plus),
        ],
        free: cmp.free,
        fixed_2: cmp.fixed_2,
        fixed_3: cmp.fixed_3,
        preferred_fixed: cmp.preferred_fixed,
    })
}

/// Log-spaced histogram of the positive β values as (lower, upper, count).
pub fn beta_histogram(records: &[EnsembleRecord], bins: usize) -> Vec<(f64, f64, usize)> {
    let logs: Vec<f64> = records
        .iter()
        .filter(|r| r.beta_heat > 0.0)
        .map(|r| r.beta_heat.log10())
        .collect();
    if logs.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![(10f64.powf(lo), 10f64.powf(hi), logs.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for x in &logs {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let a = lo + width * i as f64;
            (10f64.powf(a), 10f64.powf(a + width), c)
        })
        .collect()
}

fn band_table(report: &EnsembleReport) -> String {
    let cfg = &report.config;
    let (lo, hi) = (cfg.radius_min_m.ln(), cfg.radius_max_m.ln());
    let f3 = &report.fixed_3;
    let mut out = String::from("r_hydro_m,sigma_fit_m2,sigma_minus_m2,sigma_plus_m2,sigma_free_m2\n");
    for i in 0..cfg.band_points {
        let r = (lo + (hi - lo) * i as f64 / (cfg.band_points - 1) as f64).exp();
        let r3 = r.powi(3);
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r,
            f3.amplitude * r3,
            f3.a_minus * r3,
            f3.a_plus * r3,
            report.free.predict(r)
        );
    }
    out
}

fn scatter_table(report: &EnsembleReport) -> String {
    let mut out = String::from("particle_id,r_hydro_m,sigma_abs_m2,sigma_abs_uncertainty_m2,beta_heat\n");
    for r in &report.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.particle_id,
            r.r_hydro,
            r.sigma_abs,
            r.sigma_abs_uncertainty.map(|v| v.to_string()).unwrap_or_default(),
            r.beta_heat
        );
    }
    out
}

fn histogram_table(report: &EnsembleReport) -> String {
    let mut out = String::from("beta_lower,beta_upper,count\n");
    for (a, b, c) in beta_histogram(&report.records, report.config.histogram_bins) {
        let _ = writeln!(out, "{a},{b},{c}");
    }
    out
}

/// Writes the JSON report and the plot tables. Every file is rendered before
/// any is written, and each write is atomic.
pub fn write_ensemble_outputs(dir: &Path, report: &EnsembleReport) -> Result<Vec<PathBuf>> {
    let mut json = serde_json::to_string_pretty(report).stage(Stage::Output)?;
    json.push('\n');
    let files = [
        ("ensemble_report.json", json),
        ("ensemble_records.csv", emit_ensemble(&report.records)),
        ("beta_histogram.csv", histogram_table(report)),
        ("scatter.csv", scatter_table(report)),
        ("band.csv", band_table(report)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, sigma_log: f64) -> ExperimentConfig {
        ExperimentConfig {
            n_particles: n,
            sigma_log,
            noise: false,
            esr_dwell_s: 1e3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn seeds_depend_on_index_only() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }

    #[test]
    fn truths_follow_config() {
        let cfg = ExperimentConfig::default();
        let truths = synthesize_truths(&cfg).unwrap();
        assert_eq!(truths.len(), 46);
        assert!(truths
            .iter()
            .all(|(t, _)| t.r_hydro >= cfg.radius_min_m && t.r_hydro <= cfg.radius_max_m));
    }

    #[test]
    fn no_scatter_recovers_cubic_law() {
        let report = run_ensemble(&small(6, 0.0), Some(1)).unwrap();
        assert!(report.failures.is_empty());
        assert!((report.free.exponent - 3.0).abs() < 1e-5, "{}", report.free.exponent);
        let f3 = &report.fixed_3;
        assert!((f3.amplitude / 4e3 - 1.0).abs() < 1e-5);
        assert!((f3.a_plus / f3.a_minus - 1.0).abs() < 1e-5);
        assert_eq!(report.preferred_fixed, 3);
    }

    #[test]
    fn two_particles_is_too_few() {
        let err = run_ensemble(&small(2, 1.27), Some(1)).unwrap_err();
        assert_eq!(err.stage, Stage::PowerLaw);
    }

    #[test]
    fn histogram_counts_everything() {
        let recs: Vec<EnsembleRecord> = [1e-6, 2e-6, 5e-6, 1e-5, 3e-5]
            .iter()
            .enumerate()
            .map(|(i, &b)| EnsembleRecord {
                particle_id: i.to_string(),
                beta_heat: b,
                beta_uncertainty: None,
                r_hydro: 1e-7,
                sigma_abs: 1e-18,
                sigma_abs_uncertainty: None,
            })
            .collect();
        let h = beta_histogram(&recs, 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert!((h[0].0 - 1e-6).abs() < 1e-18 && (h[3].1 - 3e-5).abs() < 1e-16);
    }
}
