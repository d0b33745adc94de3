use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use super::{moving_average, quantile, strictly_increasing, Result, SpectralError};
use crate::estimation::{least_squares_solve, CovarianceScaling, FitProblem, Tolerances};
use crate::physics::BOLTZMANN;

/// Thermally driven, gas-damped harmonic oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillatorParams {
    /// Ω₀ (rad/s).
    pub resonance_omega: f64,
    /// Γ (1/s), the FWHM of the resonance in angular frequency.
    pub damping_gamma: f64,
    /// kg.
    pub mass: f64,
    /// Centre-of-mass temperature (K).
    pub temperature_cm: f64,
}

impl OscillatorParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.resonance_omega, self.damping_gamma, self.mass, self.temperature_cm];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SpectralError::InvalidParameters(
                "oscillator parameters must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn is_underdamped(&self) -> bool {
        self.resonance_omega > 0.5 * self.damping_gamma
    }

    /// Numerator of the one-sided displacement PSD, 4k_B·T·Γ/m.
    pub fn amplitude(&self) -> f64 {
        4.0 * BOLTZMANN * self.temperature_cm * self.damping_gamma / self.mass
    }

    /// ⟨x²⟩ = k_B·T/(m·Ω₀²).
    pub fn position_variance(&self) -> f64 {
        BOLTZMANN * self.temperature_cm / (self.mass * self.resonance_omega.powi(2))
    }
}

/// A / ((Ω₀² − ω²)² + Γ²ω²) at ω = 2πf.
pub fn psd_lineshape(amplitude: f64, resonance_omega: f64, damping_gamma: f64, f: f64) -> f64 {
    let w = 2.0 * PI * f;
    let detune = resonance_omega * resonance_omega - w * w;
    amplitude / (detune * detune + damping_gamma * damping_gamma * w * w)
}

/// One-sided displacement PSD in m²/Hz; its integral over f ≥ 0 equals
/// k_B·T/(m·Ω₀²).
pub fn psd_model(params: &OscillatorParams, f: f64) -> f64 {
    psd_lineshape(params.amplitude(), params.resonance_omega, params.damping_gamma, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPsd {
    frequencies: Vec<f64>,
    psd_values: Vec<f64>,
}

impl MotionPsd {
    pub fn new(frequencies: Vec<f64>, psd_values: Vec<f64>) -> Result<Self> {
        if frequencies.len() != psd_values.len() {
            return Err(SpectralError::InvalidSpectrum(format!(
                "{} frequencies but {} PSD values",
                frequencies.len(),
                psd_values.len()
            )));
        }
        if !strictly_increasing(&frequencies) {
            return Err(SpectralError::InvalidSpectrum(
                "frequencies must be finite and strictly increasing".into(),
            ));
        }
        if psd_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SpectralError::InvalidSpectrum("PSD values must be finite and non-negative".into()));
        }
        Ok(Self {
            frequencies,
            psd_values,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn psd_values(&self) -> &[f64] {
        &self.psd_values
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Averaged periodogram: each bin is model·χ²(2n)/(2n).
pub fn synthesize_psd(params: &OscillatorParams, grid: &[f64], n_averages: usize, seed: u64) -> Result<MotionPsd> {
    params.validate()?;
    if n_averages == 0 {
        return Err(SpectralError::InvalidParameters("n_averages must be at least 1".into()));
    }
    let dof = 2.0 * n_averages as f64;
    let chi2 = ChiSquared::new(dof).map_err(|e| SpectralError::InvalidParameters(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = grid
        .iter()
        .map(|&f| psd_model(params, f) * chi2.sample(&mut rng) / dof)
        .collect();
    MotionPsd::new(grid.to_vec(), values)
}

pub fn synthesize_psd_expected(params: &OscillatorParams, grid: &[f64]) -> Result<MotionPsd> {
    params.validate()?;
    MotionPsd::new(grid.to_vec(), grid.iter().map(|&f| psd_model(params, f)).collect())
}

/// Fitted resonance. Only A = 4k_B·T/m·Γ is identifiable from the shape, so
/// T and m are reported through their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdFit {
    pub resonance_omega: f64,
    pub damping_gamma: f64,
    pub amplitude: f64,
    /// Covariance of (ln A, Ω₀, Γ).
    pub covariance: Vec<Vec<f64>>,
    /// Frequency window (Hz) the final fit used.
    pub window: (f64, f64),
    pub n_points: usize,
    pub rms_log_residual: f64,
}

impl PsdFit {
    pub fn gamma_std(&self) -> f64 {
        self.covariance[2][2].max(0.0).sqrt()
    }

    /// T_cm/m implied by the fitted amplitude (K/kg).
    pub fn temperature_over_mass(&self) -> f64 {
        self.amplitude / (4.0 * BOLTZMANN * self.damping_gamma)
    }

    /// Full oscillator parameters once the mass is known from elsewhere.
    pub fn oscillator_params(&self, mass: f64) -> OscillatorParams {
        OscillatorParams {
            resonance_omega: self.resonance_omega,
            damping_gamma: self.damping_gamma,
            mass,
            temperature_cm: self.temperature_over_mass() * mass,
        }
    }
}

const WINDOW_LINEWIDTHS: f64 = 5.0;

fn window_indices(freqs: &[f64], center: f64, half: f64) -> (usize, usize) {
    let lo = freqs.partition_point(|&f| f < center - half);
    let hi = freqs.partition_point(|&f| f <= center + half);
    (lo, hi)
}

fn fit_window(
    psd: &MotionPsd,
    range: (usize, usize),
    seed: [f64; 3],
    tolerances: Tolerances,
) -> Result<PsdFit> {
    let freqs = &psd.frequencies()[range.0..range.1];
    let logs: Vec<f64> = psd.psd_values()[range.0..range.1]
        .iter()
        .map(|v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    if freqs.len() < 4 {
        return Err(SpectralError::FitFailure(format!(
            "only {} PSD bins inside the fit window",
            freqs.len()
        )));
    }
    let residuals = |p: &[f64]| -> Vec<f64> {
        freqs
            .iter()
            .zip(&logs)
            .map(|(&f, &y)| {
                let w = 2.0 * PI * f;
                let detune = p[1] * p[1] - w * w;
                y - (p[0] - (detune * detune + p[2] * p[2] * w * w).ln())
            })
            .collect()
    };
    let problem = FitProblem::new(&["ln_amplitude", "resonance_omega", "damping_gamma"], &seed, residuals)
        .with_bounds(1, f64::MIN_POSITIVE, f64::INFINITY)
        .with_bounds(2, f64::MIN_POSITIVE, f64::INFINITY)
        .with_fd_floor(&[1e-9, 1e-6 * seed[1], 1e-6 * seed[2]])
        .with_tolerances(tolerances)
        .with_covariance(CovarianceScaling::ResidualVariance);
    let fit = least_squares_solve(&problem)?;
    if !fit.converged {
        return Err(SpectralError::FitFailure(format!(
            "PSD fit did not converge after {} iterations",
            fit.iterations
        )));
    }
    let n = freqs.len();
    Ok(PsdFit {
        amplitude: fit.parameters[0].exp(),
        resonance_omega: fit.parameters[1],
        damping_gamma: fit.parameters[2],
        covariance: fit.covariance.clone().expect("converged fits carry a covariance"),
        window: (freqs[0], freqs[n - 1]),
        n_points: n,
        rms_log_residual: fit.residual_norm / (n as f64).sqrt(),
    })
}

/// Fits the oscillator lineshape to a measured PSD in log-amplitude space,
/// on a window of ±5 linewidths around the peak.
pub fn fit_psd(psd: &MotionPsd, tolerances: Tolerances) -> Result<PsdFit> {
    if psd.len() < 8 {
        return Err(SpectralError::InvalidSpectrum(format!(
            "PSD fit needs at least 8 bins, got {}",
            psd.len()
        )));
    }
    let freqs = psd.frequencies();
    let values = psd.psd_values();
    let peak_raw = values.iter().copied().fold(0.0, f64::max);
    let median = quantile(values, 0.5);
    if !(peak_raw > 5.0 * median) {
        return Err(SpectralError::FitFailure(format!(
            "no resonance: maximum {peak_raw:.3e} is not above 5× the median {median:.3e}"
        )));
    }
    let smooth = moving_average(values, 2);
    let (ipk, &s_pk) = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("non-empty");
    let f_pk = freqs[ipk];
    let half = 0.5 * s_pk;
    let right = smooth[ipk..].iter().position(|&v| v < half).map(|k| freqs[ipk + k] - f_pk);
    let left = smooth[..=ipk].iter().rev().position(|&v| v < half).map(|k| f_pk - freqs[ipk - k]);
    let fwhm_hz = match (left, right) {
        (Some(l), Some(r)) => l + r,
        (None, Some(r)) => 2.0 * r,
        (Some(l), None) => 2.0 * l,
        (None, None) => 0.5 * (freqs[freqs.len() - 1] - freqs[0]),
    };
    let omega0 = 2.0 * PI * f_pk.max(freqs[1]);
    let gamma = 2.0 * PI * fwhm_hz.max(freqs[1] - freqs[0]);
    let seed = [(s_pk * gamma * gamma * omega0 * omega0).ln(), omega0, gamma];

    let half_window = WINDOW_LINEWIDTHS * gamma / (2.0 * PI);
    let first = fit_window(psd, window_indices(freqs, f_pk, half_window), seed, tolerances)?;

    // Re-centre the window on the fitted resonance.
    let half_window = WINDOW_LINEWIDTHS * first.damping_gamma / (2.0 * PI);
    let center = first.resonance_omega / (2.0 * PI);
    let refined_seed = [first.amplitude.ln(), first.resonance_omega, first.damping_gamma];
    fit_window(psd, window_indices(freqs, center, half_window), refined_seed, tolerances)
}
