use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::io::{ingest_esr, ingest_psd, write_atomic, write_esr, write_psd, EnsembleRecord};
use super::{ExperimentConfig, PipelineError, Result, Stage, StageExt};
use crate::estimation::{fit_heating, HeatingFitResult, HeatingPoint};
use crate::physics::{
    beta_from_sigma, damping_rate, invert_zfs, radius_from_damping, sigma_from_beta_radius, temperature_uncertainty,
    ParticleGeometry,
};
use crate::spectral::{
    fit_esr, fit_psd, scan_grid, synthesize_esr, synthesize_esr_expected, synthesize_psd, synthesize_psd_expected,
    EsrLineParams, EsrSpectrum, MotionPsd, OscillatorParams, PsdFit,
};

/// Ground truth of a simulated particle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleTruth {
    pub particle_id: String,
    pub r_hydro: f64,
    pub sigma_abs: f64,
    pub d_strain: f64,
    /// Implied by σ and r through the heat balance.
    pub beta_heat: f64,
}

impl ParticleTruth {
    pub fn new(cfg: &ExperimentConfig, particle_id: String, r_hydro: f64, sigma_abs: f64, d_strain: f64) -> Result<Self> {
        let geom = ParticleGeometry::new(r_hydro, cfg.density_kg_m3).stage(Stage::Synthesis)?;
        let gas = cfg.gas(cfg.psd_pressure_pa()).stage(Stage::Synthesis)?;
        let beta_heat = beta_from_sigma(sigma_abs, &geom, &gas).stage(Stage::Synthesis)?;
        Ok(Self {
            particle_id,
            r_hydro,
            sigma_abs,
            d_strain,
            beta_heat,
        })
    }
}

/// An ESR spectrum together with the condition it was recorded at.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionData {
    pub intensity: f64,
    /// Pa.
    pub pressure: f64,
    pub esr: EsrSpectrum,
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParticle {
    pub truth: ParticleTruth,
    pub conditions: Vec<ConditionData>,
    pub psd: MotionPsd,
}

/// Intensity and pressure grid for a particle heating at `beta_heat`. The
/// top intensity is capped so that the lowest pressure stays at or below the
/// maximum temperature.
pub fn condition_design(cfg: &ExperimentConfig, beta_heat: f64) -> Vec<(f64, f64)> {
    let p_min = cfg.pressures_hpa.iter().copied().fold(f64::INFINITY, f64::min) * 100.0;
    let cap = if beta_heat > 0.0 {
        (cfg.max_temperature_k - cfg.t0_k) * p_min / beta_heat
    } else {
        f64::INFINITY
    };
    let top = cfg.max_intensity_w_m2.min(cap);
    let mut out = Vec::with_capacity(cfg.pressures_hpa.len() * cfg.intensity_fractions.len());
    for &p in &cfg.pressures_hpa {
        for &f in &cfg.intensity_fractions {
            out.push((f * top, p * 100.0));
        }
    }
    out
}

/// Simulates every spectrum of one particle. All randomness derives from
/// `seed`.
pub fn synthesize_particle(cfg: &ExperimentConfig, truth: ParticleTruth, seed: u64) -> Result<SyntheticParticle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poly = cfg.polynomial().stage(Stage::Synthesis)?.with_strain(truth.d_strain);
    let mut conditions = Vec::new();
    for (intensity, pressure) in condition_design(cfg, truth.beta_heat) {
        let spectrum_seed = rng.next_u64();
        let t = cfg.t0_k + truth.beta_heat * intensity / pressure;
        let d = poly.eval_unchecked(t);
        let line = EsrLineParams::symmetric(d, cfg.esr_e_split_hz, cfg.esr_contrast, cfg.esr_width_hz, cfg.esr_count_rate);
        // The scan is centred on the expected line to the nearest MHz.
        let scan = scan_grid((d / 1e6).round() * 1e6, cfg.esr_span_hz, cfg.esr_points);
        let esr = if cfg.noise {
            synthesize_esr(&line, &scan, cfg.esr_dwell_s, spectrum_seed)
        } else {
            synthesize_esr_expected(&line, &scan, cfg.esr_dwell_s)
        }
        .stage(Stage::Synthesis)?;
        conditions.push(ConditionData {
            intensity,
            pressure,
            esr,
            source: None,
        });
    }

    let gas = cfg.gas(cfg.psd_pressure_pa()).stage(Stage::Synthesis)?;
    let geom = ParticleGeometry::new(truth.r_hydro, cfg.density_kg_m3).stage(Stage::Synthesis)?;
    let osc = OscillatorParams {
        resonance_omega: 2.0 * PI * cfg.trap_frequency_hz,
        damping_gamma: damping_rate(truth.r_hydro, &gas, cfg.density_kg_m3).stage(Stage::Synthesis)?,
        mass: geom.mass(),
        temperature_cm: cfg.t0_k,
    };
    let grid = cfg.psd_grid();
    let psd_seed = rng.next_u64();
    let psd = if cfg.noise {
        synthesize_psd(&osc, &grid, cfg.psd_averages, psd_seed)
    } else {
        synthesize_psd_expected(&osc, &grid)
    }
    .stage(Stage::Synthesis)?;
    Ok(SyntheticParticle {
        truth,
        conditions,
        psd,
    })
}

/// Writes the spectra of a synthetic particle plus a manifest config that
/// `particle` can analyse. Returns the manifest path.
pub fn write_synthetic_particle(dir: &Path, cfg: &ExperimentConfig, particle: &SyntheticParticle) -> Result<PathBuf> {
    let mut manifest = cfg.clone();
    manifest.particle_id = particle.truth.particle_id.clone();
    manifest.conditions.clear();
    for (i, c) in particle.conditions.iter().enumerate() {
        let name = format!("esr_{:02}.csv", i);
        write_esr(&dir.join(&name), &c.esr)?;
        manifest.conditions.push(super::ConditionSpec {
            intensity_w_m2: c.intensity,
            pressure_hpa: c.pressure / 100.0,
            esr_file: PathBuf::from(name),
        });
    }
    write_psd(&dir.join("psd.csv"), &particle.psd)?;
    manifest.psd_file = Some(PathBuf::from("psd.csv"));
    let path = dir.join("particle.conf");
    write_atomic(&path, &manifest.to_text())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub intensity_w_m2: f64,
    pub pressure_pa: f64,
    pub d_hz: f64,
    pub sigma_d_hz: f64,
    /// The two dips were not resolved in this spectrum.
    pub merged: bool,
    /// T₀ + β̂·I/p.
    pub temperature_fit_k: f64,
    /// D inverted through the thermometer after removing the fitted strain.
    pub temperature_measured_k: f64,
    pub temperature_uncertainty_k: f64,
    pub source: Option<PathBuf>,
}

/// Single-particle result. Uncertainties are one standard deviation,
/// propagated to first order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleReport {
    pub particle_id: String,
    pub beta_heat: f64,
    pub beta_uncertainty: f64,
    pub d_strain_hz: f64,
    pub d_strain_uncertainty_hz: f64,
    pub damping_gamma: f64,
    pub damping_gamma_uncertainty: f64,
    pub r_hydro: f64,
    pub r_hydro_uncertainty: f64,
    pub sigma_abs: f64,
    pub sigma_abs_uncertainty: f64,
    pub heating_chi_squared: f64,
    pub conditions: Vec<ConditionSummary>,
    pub heating: HeatingFitResult,
    pub psd: PsdFit,
}

impl ParticleReport {
    pub fn record(&self) -> EnsembleRecord {
        EnsembleRecord {
            particle_id: self.particle_id.clone(),
            beta_heat: self.beta_heat,
            beta_uncertainty: Some(self.beta_uncertainty),
            r_hydro: self.r_hydro,
            sigma_abs: self.sigma_abs,
            sigma_abs_uncertainty: Some(self.sigma_abs_uncertainty),
        }
    }
}

/// Full chain for one particle: ESR fits, heating fit, thermometry, PSD fit,
/// hydrodynamic radius and absorption cross-section.
pub fn analyze_particle(
    cfg: &ExperimentConfig,
    particle_id: &str,
    conditions: &[ConditionData],
    psd: &MotionPsd,
    psd_source: Option<&Path>,
) -> Result<ParticleReport> {
    let tol = cfg.tolerances();
    let poly = cfg.polynomial().stage(Stage::Config)?;
    if conditions.len() < 4 {
        return Err(PipelineError::new(
            Stage::HeatingFit,
            format!("a particle needs at least 4 conditions, got {}", conditions.len()),
        ));
    }

    let mut esr_fits = Vec::with_capacity(conditions.len());
    for c in conditions {
        let fit = fit_esr(&c.esr, tol).map_err(|e| PipelineError::new(Stage::EsrFit, e).or_file(c.source.as_deref()))?;
        esr_fits.push(fit);
    }
    let points: Vec<HeatingPoint> = conditions
        .iter()
        .zip(&esr_fits)
        .map(|(c, f)| HeatingPoint {
            intensity: c.intensity,
            pressure: c.pressure,
            d_measured: f.params.d_center,
            sigma_d: f.sigma_d,
        })
        .collect();
    let gas = cfg.gas(conditions[0].pressure).stage(Stage::Config)?;
    let heating = fit_heating(&points, &poly, &gas, tol).stage(Stage::HeatingFit)?;

    let strained = poly.with_strain(heating.d_strain);
    let mut summaries = Vec::with_capacity(conditions.len());
    for ((c, f), t_fit) in conditions.iter().zip(&esr_fits).zip(&heating.fitted_temperatures) {
        let located = |e: crate::physics::PhysicsError| PipelineError::new(Stage::Thermometry, e).or_file(c.source.as_deref());
        let t_meas = invert_zfs(&strained, f.params.d_center).map_err(located)?;
        summaries.push(ConditionSummary {
            intensity_w_m2: c.intensity,
            pressure_pa: c.pressure,
            d_hz: f.params.d_center,
            sigma_d_hz: f.sigma_d,
            merged: f.merged,
            temperature_fit_k: *t_fit,
            temperature_measured_k: t_meas,
            temperature_uncertainty_k: temperature_uncertainty(f.sigma_d, &strained, t_meas).map_err(located)?,
            source: c.source.clone(),
        });
    }

    let psd_fit = fit_psd(psd, tol).map_err(|e| PipelineError::new(Stage::PsdFit, e).or_file(psd_source))?;
    let psd_gas = cfg.gas(cfg.psd_pressure_pa()).stage(Stage::Config)?;
    let r_hydro = radius_from_damping(psd_fit.damping_gamma, &psd_gas, cfg.density_kg_m3)
        .map_err(|e| PipelineError::new(Stage::Radius, e).or_file(psd_source))?;
    let gamma_rel = psd_fit.gamma_std() / psd_fit.damping_gamma;
    let sigma_abs = sigma_from_beta_radius(heating.beta_heat, r_hydro, &psd_gas).stage(Stage::CrossSection)?;
    // σ ∝ β·r² and r ∝ 1/Γ, with β and Γ from independent fits.
    let beta_rel = heating.beta_std() / heating.beta_heat.abs();
    let sigma_rel = (beta_rel.powi(2) + (2.0 * gamma_rel).powi(2)).sqrt();

    Ok(ParticleReport {
        particle_id: particle_id.to_string(),
        beta_heat: heating.beta_heat,
        beta_uncertainty: heating.beta_std(),
        d_strain_hz: heating.d_strain,
        d_strain_uncertainty_hz: heating.d_strain_std(),
        damping_gamma: psd_fit.damping_gamma,
        damping_gamma_uncertainty: psd_fit.gamma_std(),
        r_hydro,
        r_hydro_uncertainty: r_hydro * gamma_rel,
        sigma_abs,
        sigma_abs_uncertainty: sigma_abs * sigma_rel,
        heating_chi_squared: heating.chi_squared,
        conditions: summaries,
        heating,
        psd: psd_fit,
    })
}

/// Reads the spectra listed in a particle config and analyses them.
pub fn run_particle(cfg: &ExperimentConfig) -> Result<ParticleReport> {
    let psd_path = cfg
        .psd_file
        .as_deref()
        .ok_or_else(|| PipelineError::new(Stage::Config, "particle config needs `psd_file`"))?;
    let mut conditions = Vec::with_capacity(cfg.conditions.len());
    for spec in &cfg.conditions {
        conditions.push(ConditionData {
            intensity: spec.intensity_w_m2,
            pressure: spec.pressure_hpa * 100.0,
            esr: ingest_esr(&spec.esr_file)?,
            source: Some(spec.esr_file.clone()),
        });
    }
    let psd = ingest_psd(psd_path)?;
    analyze_particle(cfg, &cfg.particle_id, &conditions, &psd, Some(psd_path))
}
