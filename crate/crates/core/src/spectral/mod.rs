//! Forward models, seeded synthetic generators and fitters for the two
//! measured spectra: the optically detected ESR dip spectrum and the
//! power spectral density of the particle motion.

mod esr;
mod psd;

pub use esr::{
    esr_model, esr_model_gradient, fit_esr, lorentzian, scan_grid, synthesize_esr, synthesize_esr_expected, EsrFit,
    EsrLineParams, EsrSpectrum,
};
pub use psd::{
    fit_psd, psd_lineshape, psd_model, synthesize_psd, synthesize_psd_expected, MotionPsd, OscillatorParams, PsdFit,
};

use thiserror::Error;

use crate::estimation::FitError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

fn strictly_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] > w[0]) && values.iter().all(|v| v.is_finite())
}

/// Centered moving average; the window shrinks at the edges.
fn moving_average(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
