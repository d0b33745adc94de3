use serde::{Deserialize, Serialize};

use super::{least_squares_solve, CovarianceScaling, FitError, FitProblem, Tolerances};
use crate::physics::ZfsPolynomial;

/// Result of the on-substrate calibration D(T) = a0 + Σ aₖ(αT)ᵏ with a0 and α
/// free and the higher coefficients held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub a0: f64,
    pub alpha: f64,
    /// Covariance of (a0, α).
    pub covariance: [[f64; 2]; 2],
    /// a0 minus the reference polynomial's a0.
    pub d_strain: f64,
    /// α·T_set for each input pair.
    pub corrected_temperatures: Vec<f64>,
    pub residual_rms: f64,
}

/// Fits (a0, α) to pairs of (set temperature K, measured D Hz). The fixed
/// coefficients a1..a3 and the reference a0 come from `reference`.
pub fn fit_calibration_alpha(
    pairs: &[(f64, f64)],
    reference: &ZfsPolynomial,
    tolerances: Tolerances,
) -> Result<CalibrationFit, FitError> {
    if pairs.len() < 3 {
        return Err(FitError::InvalidInput(format!(
            "calibration needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(t, d)| !(t.is_finite() && *t > 0.0 && d.is_finite())) {
        return Err(FitError::InvalidInput("temperatures must be positive and values finite".into()));
    }
    let t_lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let t_hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if t_hi - t_lo < 50.0 {
        return Err(FitError::Unidentifiable(format!(
            "temperature span {:.1} K is below the 50 K needed to separate a0 from α",
            t_hi - t_lo
        )));
    }

    let poly = *reference;
    let a0_seed = pairs
        .iter()
        .map(|(t, d)| d - poly.shift_unchecked(*t))
        .sum::<f64>()
        / pairs.len() as f64;
    let problem = FitProblem::new(&["a0", "alpha"], &[a0_seed, 1.0], move |p| {
        pairs
            .iter()
            .map(|(t, d)| (d - p[0]) - poly.shift_unchecked(p[1] * t))
            .collect()
    })
    .with_bounds(1, 1e-3, 1e3)
    .with_fd_floor(&[1e-3, 1e-9])
    .with_tolerances(tolerances)
    .with_covariance(CovarianceScaling::ResidualVariance);

    let fit = least_squares_solve(&problem)?;
    if !fit.converged {
        return Err(FitError::NotConverged {
            iterations: fit.iterations,
        });
    }
    let cov = fit.covariance.as_ref().expect("converged fits carry a covariance");
    let (a0, alpha) = (fit.parameters[0], fit.parameters[1]);
    Ok(CalibrationFit {
        a0,
        alpha,
        covariance: [[cov[0][0], cov[0][1]], [cov[1][0], cov[1][1]]],
        d_strain: a0 - reference.a0,
        corrected_temperatures: pairs.iter().map(|(t, _)| alpha * t).collect(),
        residual_rms: fit.residual_norm / (pairs.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const T_SET: [f64; 5] = [294.0, 320.0, 350.0, 380.0, 411.0];

    fn synthetic(a0: f64, alpha: f64) -> Vec<(f64, f64)> {
        // Oracle: the calibration model written out term by term.
        T_SET
            .iter()
            .map(|&t| {
                let x = alpha * t;
                (t, a0 + 9.7e4 * x - 3.7e2 * x * x + 0.17 * x * x * x)
            })
            .collect()
    }

    #[test]
    fn recovers_alpha_and_a0() {
        let data = synthetic(2.8707e9, 0.90);
        let fit = fit_calibration_alpha(&data, &ZfsPolynomial::default(), Tolerances::default()).unwrap();
        assert!(((fit.a0 - 2.8707e9) / 2.8707e9).abs() < 1e-8);
        assert!(((fit.alpha - 0.90) / 0.90).abs() < 1e-8);
        assert!((fit.d_strain - 1.0e6).abs() < 50.0);
        assert!((fit.corrected_temperatures[4] - 0.9 * 411.0).abs() < 1e-5);
    }

    #[test]
    fn identity_calibration() {
        let data = synthetic(2.8697e9, 1.0);
        let fit = fit_calibration_alpha(&data, &ZfsPolynomial::default(), Tolerances::default()).unwrap();
        assert!((fit.a0 - 2.8697e9).abs() < 1.0);
        assert!((fit.alpha - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_span_rejected() {
        let data = vec![(300.0, 2.87e9), (300.0, 2.87e9)];
        assert!(fit_calibration_alpha(&data, &ZfsPolynomial::default(), Tolerances::default()).is_err());
        let narrow = vec![(300.0, 2.87e9), (310.0, 2.869e9), (320.0, 2.868e9)];
        assert!(matches!(
            fit_calibration_alpha(&narrow, &ZfsPolynomial::default(), Tolerances::default()),
            Err(FitError::Unidentifiable(_))
        ));
    }
}
