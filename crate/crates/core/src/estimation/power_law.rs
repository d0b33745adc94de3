use serde::{Deserialize, Serialize};

use super::FitError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentMode {
    Free,
    Fixed(f64),
}

/// σ_abs ≈ a·rⁿ fitted in log–log space, with a multiplicative 2σ band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// In m^(2−n) so that a·rⁿ is an area.
    pub amplitude: f64,
    pub exponent: f64,
    pub exponent_free: bool,
    /// Standard error of n̂ (free mode only).
    pub exponent_std: Option<f64>,
    /// Residual sum of squares of ln σ.
    pub rss_log: f64,
    /// Standard deviation of the log residuals, √(RSS/(N − p)).
    pub sigma_log: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub n_records: usize,
}

impl PowerLawFit {
    /// Exponent of metres carried by the amplitude.
    pub fn amplitude_unit_exponent(&self) -> f64 {
        2.0 - self.exponent
    }

    pub fn predict(&self, r: f64) -> f64 {
        self.amplitude * r.powf(self.exponent)
    }
}

fn log_records(records: &[(f64, f64)]) -> Result<(Vec<f64>, Vec<f64>), FitError> {
    if records.len() < 3 {
        return Err(FitError::InvalidInput(format!(
            "power-law fit needs at least 3 records, got {}",
            records.len()
        )));
    }
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for (i, &(r, s)) in records.iter().enumerate() {
        if !(r > 0.0 && s > 0.0 && r.is_finite() && s.is_finite()) {
            return Err(FitError::InvalidInput(format!(
                "record {i}: radius and cross-section must be positive (got {r}, {s})"
            )));
        }
        xs.push(r.ln());
        ys.push(s.ln());
    }
    Ok((xs, ys))
}

pub fn fit_power_law(records: &[(f64, f64)], mode: ExponentMode) -> Result<PowerLawFit, FitError> {
    let (xs, ys) = log_records(records)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;

    let (exponent, log_a, exponent_free, n_params) = match mode {
        ExponentMode::Free => {
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            if sxx <= 0.0 {
                return Err(FitError::Unidentifiable("all radii are equal".into()));
            }
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let slope = sxy / sxx;
            (slope, my - slope * mx, true, 2)
        }
        ExponentMode::Fixed(k) => {
            if !k.is_finite() {
                return Err(FitError::InvalidInput("fixed exponent must be finite".into()));
            }
            (k, my - k * mx, false, 1)
        }
    };

    let rss_log: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - log_a - exponent * x).powi(2))
        .sum();
    let dof = (xs.len() - n_params) as f64;
    let sigma_log = (rss_log / dof).sqrt();
    let exponent_std = exponent_free.then(|| {
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sigma_log / sxx.sqrt()
    });
    let amplitude = log_a.exp();
    Ok(PowerLawFit {
        amplitude,
        exponent,
        exponent_free,
        exponent_std,
        rss_log,
        sigma_log,
        a_minus: (log_a - 2.0 * sigma_log).exp(),
        a_plus: (log_a + 2.0 * sigma_log).exp(),
        n_records: records.len(),
    })
}

/// Band a± = a·exp(±2σ_log) where σ_log is the spread of the log residuals of
/// `records` about `fit`.
pub fn confidence_band(fit: &PowerLawFit, records: &[(f64, f64)]) -> Result<(f64, f64), FitError> {
    let (xs, ys) = log_records(records)?;
    let log_a = fit.amplitude.ln();
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - log_a - fit.exponent * x).powi(2))
        .sum();
    let n_params = if fit.exponent_free { 2 } else { 1 };
    let sigma_log = (rss / (xs.len() - n_params) as f64).sqrt();
    Ok(((log_a - 2.0 * sigma_log).exp(), (log_a + 2.0 * sigma_log).exp()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentComparison {
    pub free: PowerLawFit,
    pub fixed_2: PowerLawFit,
    pub fixed_3: PowerLawFit,
    /// 2 or 3, whichever fixed exponent has the lower residual sum.
    pub preferred_fixed: u8,
}

pub fn compare_exponents(records: &[(f64, f64)]) -> Result<ExponentComparison, FitError> {
    let free = fit_power_law(records, ExponentMode::Free)?;
    let fixed_2 = fit_power_law(records, ExponentMode::Fixed(2.0))?;
    let fixed_3 = fit_power_law(records, ExponentMode::Fixed(3.0))?;
    let preferred_fixed = if fixed_3.rss_log < fixed_2.rss_log { 3 } else { 2 };
    Ok(ExponentComparison {
        free,
        fixed_2,
        fixed_3,
        preferred_fixed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(a: f64, n: f64) -> Vec<(f64, f64)> {
        [50e-9, 75e-9, 100e-9, 125e-9, 150e-9]
            .iter()
            .map(|&r: &f64| (r, a * r.powf(n)))
            .collect()
    }

    #[test]
    fn exact_cubic() {
        let fit = fit_power_law(&exact(4e3, 3.0), ExponentMode::Free).unwrap();
        assert!((fit.exponent - 3.0).abs() < 1e-9);
        assert!(((fit.amplitude - 4e3) / 4e3).abs() < 1e-9);
        assert!((fit.amplitude_unit_exponent() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_exponent_fits_worse() {
        let data = exact(4e3, 3.0);
        let f2 = fit_power_law(&data, ExponentMode::Fixed(2.0)).unwrap();
        let f3 = fit_power_law(&data, ExponentMode::Fixed(3.0)).unwrap();
        assert!(f2.rss_log > f3.rss_log);
        assert!(((f3.amplitude - 4e3) / 4e3).abs() < 1e-9);
    }

    #[test]
    fn zero_residual_band_collapses() {
        let data = exact(4e3, 3.0);
        let fit = fit_power_law(&data, ExponentMode::Fixed(3.0)).unwrap();
        let (lo, hi) = confidence_band(&fit, &data).unwrap();
        assert!(((lo - fit.amplitude) / fit.amplitude).abs() < 1e-9);
        assert!(((hi - fit.amplitude) / fit.amplitude).abs() < 1e-9);
    }

    #[test]
    fn band_is_multiplicatively_symmetric() {
        let data: Vec<(f64, f64)> = [40e-9, 60e-9, 90e-9, 120e-9, 150e-9]
            .iter()
            .zip([0.3, 2.5, 1.0, 0.2, 4.0])
            .map(|(&r, f): (&f64, f64)| (r, 4e3 * r.powi(3) * f))
            .collect();
        let fit = fit_power_law(&data, ExponentMode::Fixed(3.0)).unwrap();
        let (lo, hi) = confidence_band(&fit, &data).unwrap();
        assert!((hi / fit.amplitude - fit.amplitude / lo).abs() < 1e-12 * hi / fit.amplitude);
        assert_eq!((lo, hi), (fit.a_minus, fit.a_plus));
    }

    #[test]
    fn comparison_prefers_true_exponent() {
        assert_eq!(compare_exponents(&exact(4e3, 3.0)).unwrap().preferred_fixed, 3);
        assert_eq!(compare_exponents(&exact(1e-3, 2.0)).unwrap().preferred_fixed, 2);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(fit_power_law(&exact(4e3, 3.0)[..2], ExponentMode::Free).is_err());
        let mut data = exact(4e3, 3.0);
        data[1].1 = -1.0;
        assert!(fit_power_law(&data, ExponentMode::Free).is_err());
        let same_r = vec![(1e-7, 1e-18), (1e-7, 2e-18), (1e-7, 3e-18)];
        assert!(matches!(
            fit_power_law(&same_r, ExponentMode::Free),
            Err(FitError::Unidentifiable(_))
        ));
    }
}
