use serde::{Deserialize, Serialize};

use super::{least_squares_solve, CovarianceScaling, FitError, FitProblem, Tolerances};
use crate::physics::{GasConditions, ZfsPolynomial};

/// One ESR reading taken at a given trapping intensity and gas pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatingPoint {
    /// W/m².
    pub intensity: f64,
    /// Pa.
    pub pressure: f64,
    /// Fitted zero-field splitting (Hz).
    pub d_measured: f64,
    /// Its standard uncertainty (Hz); zero or negative means unknown.
    pub sigma_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatingFitResult {
    /// K·Pa·m²/W.
    pub beta_heat: f64,
    /// Hz.
    pub d_strain: f64,
    /// Covariance of (β, D_strain).
    pub covariance: [[f64; 2]; 2],
    pub fitted_temperatures: Vec<f64>,
    /// Weighted residuals (d − model)/σ_d.
    pub residuals: Vec<f64>,
    pub chi_squared: f64,
    pub iterations: usize,
    /// False when no σ_d was supplied and unit weights were used.
    pub weighted: bool,
    /// Ambient temperature and polynomial the fit was done against.
    pub t0: f64,
    pub poly: ZfsPolynomial,
}

impl HeatingFitResult {
    pub fn beta_std(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn d_strain_std(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }

    pub fn temperature(&self, intensity: f64, pressure: f64) -> f64 {
        self.t0 + self.beta_heat * intensity / pressure
    }

    /// Model D at a condition; at zero intensity this is D(T₀) + D_strain.
    pub fn predict_d(&self, intensity: f64, pressure: f64) -> f64 {
        self.poly
            .with_strain(self.d_strain)
            .eval_unchecked(self.temperature(intensity, pressure))
    }
}

fn validate(points: &[HeatingPoint], gas: &GasConditions) -> Result<bool, FitError> {
    gas.validate().map_err(|e| FitError::InvalidInput(e.to_string()))?;
    for (i, p) in points.iter().enumerate() {
        if !(p.intensity >= 0.0 && p.intensity.is_finite()) || !(p.pressure > 0.0 && p.pressure.is_finite()) {
            return Err(FitError::InvalidInput(format!(
                "point {i}: intensity must be ≥ 0 and pressure > 0"
            )));
        }
        if !p.d_measured.is_finite() || p.sigma_d.is_nan() {
            return Err(FitError::InvalidInput(format!("point {i}: non-finite value")));
        }
    }
    if !points.is_empty() && points.iter().all(|p| p.intensity == 0.0) {
        return Err(FitError::Unidentifiable(
            "all intensities are zero, β_heat cannot be determined".into(),
        ));
    }
    if points.len() < 4 {
        return Err(FitError::InvalidInput(format!(
            "heating fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    let distinct = |f: fn(&HeatingPoint) -> f64| {
        let mut v: Vec<f64> = points.iter().map(f).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v.len()
    };
    if distinct(|p| p.pressure) < 2 || distinct(|p| p.intensity) < 2 {
        return Err(FitError::Unidentifiable(
            "need at least two distinct pressures and two distinct intensities".into(),
        ));
    }
    let supplied = points.iter().filter(|p| p.sigma_d > 0.0).count();
    if supplied != 0 && supplied != points.len() {
        return Err(FitError::InvalidInput(
            "sigma_d must be given for every point or for none".into(),
        ));
    }
    Ok(supplied == points.len())
}

/// The weighted least-squares problem behind [`fit_heating`], in parameters
/// (β_heat, D_strain). Exposed so callers can inspect the objective.
pub fn heating_problem<'a>(
    points: &'a [HeatingPoint],
    poly: &ZfsPolynomial,
    gas: &GasConditions,
) -> Result<FitProblem<'a>, FitError> {
    let weighted = validate(points, gas)?;
    let poly = poly.with_strain(0.0);
    let t0 = gas.t0;

    // Linearise D around T₀ for the starting point.
    let slope0 = poly.slope_unchecked(t0);
    let xs: Vec<f64> = points.iter().map(|p| p.intensity / p.pressure).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.d_measured - poly.a0).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let coef = sxy / sxx;
    let beta_seed = coef / slope0;
    let strain_seed = (my - coef * mx) - poly.shift_unchecked(t0);
    let beta_scale = beta_seed.abs().max(1e-9);

    let problem = FitProblem::new(&["beta_heat", "d_strain"], &[beta_seed, strain_seed], move |p| {
        points
            .iter()
            .map(|pt| {
                let t = t0 + p[0] * pt.intensity / pt.pressure;
                let model = p[1] + poly.shift_unchecked(t);
                let r = (pt.d_measured - poly.a0) - model;
                if weighted {
                    r / pt.sigma_d
                } else {
                    r
                }
            })
            .collect()
    })
    .with_fd_floor(&[1e-6 * beta_scale, 1e-3])
    .with_covariance(if weighted {
        CovarianceScaling::Absolute
    } else {
        CovarianceScaling::ResidualVariance
    });
    Ok(problem)
}

/// Joint fit of T_int = T₀ + β·I/p through the thermometer polynomial, with
/// β_heat and the strain offset free and T₀ fixed.
pub fn fit_heating(
    points: &[HeatingPoint],
    poly: &ZfsPolynomial,
    gas: &GasConditions,
    tolerances: Tolerances,
) -> Result<HeatingFitResult, FitError> {
    let weighted = validate(points, gas)?;
    let problem = heating_problem(points, poly, gas)?.with_tolerances(tolerances);
    let fit = least_squares_solve(&problem)?;
    if !fit.converged {
        return Err(FitError::NotConverged {
            iterations: fit.iterations,
        });
    }
    let cov = fit.covariance.as_ref().expect("converged fits carry a covariance");
    let (beta_heat, d_strain) = (fit.parameters[0], fit.parameters[1]);
    Ok(HeatingFitResult {
        beta_heat,
        d_strain,
        covariance: [[cov[0][0], cov[0][1]], [cov[1][0], cov[1][1]]],
        fitted_temperatures: points
            .iter()
            .map(|p| gas.t0 + beta_heat * p.intensity / p.pressure)
            .collect(),
        chi_squared: fit.chi_squared(),
        residuals: fit.residuals,
        iterations: fit.iterations,
        weighted,
        t0: gas.t0,
        poly: poly.with_strain(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::eval_zfs;

    const BETA: f64 = 2.4807e-5;

    fn grid(beta: f64, d_strain: f64, sigma_d: f64) -> Vec<HeatingPoint> {
        let poly = ZfsPolynomial::default().with_strain(d_strain);
        let mut pts = Vec::new();
        for &i in &[0.5e10, 1.0e10, 2.0e10] {
            for &p in &[2000.0, 3000.0, 5000.0] {
                let t = 294.0 + beta * i / p;
                pts.push(HeatingPoint {
                    intensity: i,
                    pressure: p,
                    d_measured: eval_zfs(&poly, t).unwrap(),
                    sigma_d,
                });
            }
        }
        pts
    }

    #[test]
    fn noiseless_recovery() {
        let pts = grid(BETA, 3e6, 1.5e5);
        let gas = GasConditions::air(3000.0).unwrap();
        let fit = fit_heating(&pts, &ZfsPolynomial::default(), &gas, Tolerances::default()).unwrap();
        assert!(((fit.beta_heat - BETA) / BETA).abs() < 1e-8, "{}", fit.beta_heat);
        assert!(((fit.d_strain - 3e6) / 3e6).abs() < 1e-8, "{}", fit.d_strain);
        assert!(fit.weighted);
        let d0 = fit.predict_d(0.0, 3000.0);
        assert_eq!(d0, ZfsPolynomial::default().with_strain(fit.d_strain).eval_unchecked(294.0));
    }

    #[test]
    fn zero_beta_exact_data() {
        let gas = GasConditions::air(3000.0).unwrap();
        for sigma in [1e5, 0.0] {
            let pts = grid(0.0, 2e6, sigma);
            let fit = fit_heating(&pts, &ZfsPolynomial::default(), &gas, Tolerances::default()).unwrap();
            assert_eq!(fit.weighted, sigma > 0.0);
            assert!(fit.beta_heat.abs() < 1e-15);
            assert!(fit.fitted_temperatures.iter().all(|t| (t - 294.0).abs() < 1e-6));
            assert!((fit.d_strain - 2e6).abs() < 1e-3);
        }
    }

    #[test]
    fn all_zero_intensity_is_unidentifiable() {
        let pts: Vec<_> = grid(BETA, 0.0, 1e5)
            .into_iter()
            .map(|p| HeatingPoint { intensity: 0.0, ..p })
            .collect();
        let gas = GasConditions::air(3000.0).unwrap();
        assert!(matches!(
            fit_heating(&pts, &ZfsPolynomial::default(), &gas, Tolerances::default()),
            Err(FitError::Unidentifiable(_))
        ));
    }

    #[test]
    fn insufficient_design_rejected() {
        let gas = GasConditions::air(3000.0).unwrap();
        let pts = grid(BETA, 0.0, 1e5);
        assert!(fit_heating(&pts[..3], &ZfsPolynomial::default(), &gas, Tolerances::default()).is_err());
        let one_pressure: Vec<_> = pts.iter().copied().filter(|p| p.pressure == 3000.0).collect();
        let mut padded = one_pressure.clone();
        padded.push(one_pressure[0]);
        assert!(fit_heating(&padded, &ZfsPolynomial::default(), &gas, Tolerances::default()).is_err());
        let mut mixed = pts.clone();
        mixed[0].sigma_d = 0.0;
        assert!(fit_heating(&mixed, &ZfsPolynomial::default(), &gas, Tolerances::default()).is_err());
    }
}
