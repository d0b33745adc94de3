//! Damped Gauss–Newton (Levenberg–Marquardt) solver with a central
//! finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FitError;

type ResidualFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative (scaled) step length below which the iteration stops.
    pub step: f64,
    /// Gradient norm, relative to the initial gradient, below which the
    /// iteration stops.
    pub gradient: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            step: 1e-10,
            gradient: 1e-12,
            max_iterations: 200,
        }
    }
}

/// How the parameter covariance is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceScaling {
    /// Residuals are already divided by their true standard deviations.
    Absolute,
    /// Scale (JᵀJ)⁻¹ by the residual variance χ²/(m − n).
    ResidualVariance,
}

/// A weighted least-squares problem: minimise ½‖r(p)‖².
pub struct FitProblem<'a> {
    residuals: ResidualFn<'a>,
    names: Vec<String>,
    initial: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    fd_floor: Vec<f64>,
    pub tolerances: Tolerances,
    pub covariance: CovarianceScaling,
}

impl<'a> FitProblem<'a> {
    pub fn new<F>(names: &[&str], initial: &[f64], residuals: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a,
    {
        let n = initial.len();
        Self {
            residuals: Box::new(residuals),
            names: names.iter().map(|s| s.to_string()).collect(),
            initial: initial.to_vec(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
            fd_floor: vec![1e-12; n],
            tolerances: Tolerances::default(),
            covariance: CovarianceScaling::ResidualVariance,
        }
    }

    pub fn with_bounds(mut self, index: usize, lower: f64, upper: f64) -> Self {
        self.bounds[index] = (lower, upper);
        self
    }

    /// Smallest finite-difference step for each parameter. The step is
    /// max(10⁻⁶·|p|, floor); the default floor is 10⁻¹².
    pub fn with_fd_floor(mut self, floors: &[f64]) -> Self {
        self.fd_floor = floors.to_vec();
        self
    }

    pub fn with_tolerances(mut self, tolerances: Tolerances) -> Self {
        self.tolerances = tolerances;
        self
    }

    pub fn with_covariance(mut self, scaling: CovarianceScaling) -> Self {
        self.covariance = scaling;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn evaluate(&self, p: &[f64]) -> Vec<f64> {
        (self.residuals)(p)
    }

    pub fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        finite_difference_jacobian(&*self.residuals, p, &self.fd_floor)
    }

    fn clamp(&self, p: &mut [f64]) {
        for (x, &(lo, hi)) in p.iter_mut().zip(&self.bounds) {
            *x = x.clamp(lo, hi);
        }
    }
}

/// Central-difference Jacobian, step max(10⁻⁶·|pⱼ|, floorⱼ).
pub fn finite_difference_jacobian<F>(f: &F, p: &[f64], floor: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64> + ?Sized,
{
    let base = f(p);
    let mut jac = DMatrix::zeros(base.len(), p.len());
    let mut work = p.to_vec();
    for j in 0..p.len() {
        let h = (1e-6 * p[j].abs()).max(floor.get(j).copied().unwrap_or(1e-12));
        work[j] = p[j] + h;
        let plus = f(&work);
        work[j] = p[j] - h;
        let minus = f(&work);
        work[j] = p[j];
        let denom = 2.0 * h;
        for i in 0..base.len() {
            jac[(i, j)] = (plus[i] - minus[i]) / denom;
        }
    }
    jac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    ZeroResidual,
    StepTolerance,
    GradientTolerance,
    /// No damped step reduced the cost any further.
    NoFurtherReduction,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub parameters: Vec<f64>,
    /// Present only for converged fits.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Weighted residuals at the solution.
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// The normal matrix was singular; covariance is a pseudo-inverse.
    pub singular: bool,
}

impl FitResult {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }

    pub fn chi_squared(&self) -> f64 {
        self.residual_norm * self.residual_norm
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.parameters[i])
    }
}

fn cost_of(r: &[f64]) -> f64 {
    let s: f64 = r.iter().map(|x| x * x).sum();
    if s.is_finite() {
        0.5 * s
    } else {
        f64::INFINITY
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

const LAMBDA_MAX: f64 = 1e20;
/// Relative cost change treated as indistinguishable from rounding.
const NOISE_FLOOR: f64 = 1e-10;

pub fn least_squares_solve(problem: &FitProblem<'_>) -> Result<FitResult, FitError> {
    let n = problem.initial.len();
    if n == 0 || problem.names.len() != n || problem.bounds.len() != n || problem.fd_floor.len() != n {
        return Err(FitError::InvalidProblem("parameter metadata does not match the initial vector".into()));
    }
    let mut p = problem.initial.clone();
    problem.clamp(&mut p);
    let mut r = problem.evaluate(&p);
    let m = r.len();
    if m < n {
        return Err(FitError::InvalidProblem(format!(
            "{m} residuals cannot determine {n} parameters"
        )));
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(FitError::NonFiniteResiduals);
    }
    let mut cost = cost_of(&r);
    let mut jac = problem.jacobian(&p);
    let mut grad = jac.tr_mul(&DVector::from_column_slice(&r));
    let g0 = max_abs(&grad);

    let mut lambda = 1e-3;
    let mut iterations = 0;
    let termination = 'outer: loop {
        if cost == 0.0 {
            break Termination::ZeroResidual;
        }
        if max_abs(&grad) <= problem.tolerances.gradient * g0 {
            break Termination::GradientTolerance;
        }
        if iterations >= problem.tolerances.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let normal = jac.tr_mul(&jac);
        let diag: Vec<f64> = (0..n).map(|i| normal[(i, i)].max(f64::MIN_POSITIVE)).collect();
        loop {
            let mut damped = normal.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * diag[i];
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        break 'outer Termination::NoFurtherReduction;
                    }
                    continue;
                }
            };
            let mut trial = p.clone();
            for i in 0..n {
                trial[i] += step[i];
            }
            problem.clamp(&mut trial);
            let r_trial = problem.evaluate(&trial);
            let cost_trial = if r_trial.len() == m { cost_of(&r_trial) } else { f64::INFINITY };
            // Near the optimum the predicted decrease drops below the
            // rounding noise of the cost itself, while the gradient is still
            // resolved; judge such steps by the gradient instead.
            let predicted = -grad.dot(&step) - 0.5 * (&jac * &step).norm_squared();
            let mut trial_derivs = None;
            if cost_trial >= cost && predicted < NOISE_FLOOR * cost && cost_trial <= cost * (1.0 + NOISE_FLOOR) {
                let j = problem.jacobian(&trial);
                let g = j.tr_mul(&DVector::from_column_slice(&r_trial));
                if max_abs(&g) < 0.5 * max_abs(&grad) {
                    trial_derivs = Some((j, g));
                }
            }
            if cost_trial < cost || trial_derivs.is_some() {
                let scaled_step: f64 = (0..n)
                    .map(|i| diag[i] * (trial[i] - p[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let scaled_p: f64 = (0..n).map(|i| diag[i] * p[i] * p[i]).sum::<f64>().sqrt();
                p = trial;
                r = r_trial;
                cost = cost_trial;
                lambda = (lambda / 10.0).max(1e-12);
                (jac, grad) = trial_derivs.unwrap_or_else(|| {
                    let j = problem.jacobian(&p);
                    let g = j.tr_mul(&DVector::from_column_slice(&r));
                    (j, g)
                });
                if scaled_step <= problem.tolerances.step * scaled_p {
                    break 'outer Termination::StepTolerance;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                break 'outer Termination::NoFurtherReduction;
            }
        }
    };

    let converged = termination != Termination::MaxIterations;
    let (covariance, singular) = if converged {
        let (cov, singular) = covariance_from_jacobian(&jac);
        let scale = match problem.covariance {
            CovarianceScaling::Absolute => 1.0,
            CovarianceScaling::ResidualVariance => 2.0 * cost / ((m - n).max(1) as f64),
        };
        let cov = cov * scale;
        (
            Some((0..n).map(|i| (0..n).map(|j| cov[(i, j)]).collect()).collect()),
            singular,
        )
    } else {
        (None, false)
    };

    Ok(FitResult {
        names: problem.names.clone(),
        parameters: p,
        covariance,
        residual_norm: (2.0 * cost).sqrt(),
        residuals: r,
        iterations,
        converged,
        termination,
        singular,
    })
}

/// (JᵀJ)⁻¹ with Jacobi pre-scaling; falls back to an SVD pseudo-inverse when
/// the normal matrix is singular.
pub fn covariance_from_jacobian(jac: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = jac.ncols();
    let normal = jac.tr_mul(jac);
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = normal[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let s = DMatrix::from_diagonal(&DVector::from_vec(scale));
    let scaled = &s * &normal * &s;
    let cond_ok = {
        let sv = scaled.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        max > 0.0 && min > max * 1e-14
    };
    if cond_ok {
        if let Some(ch) = scaled.clone().cholesky() {
            let inv = ch.inverse();
            let cov = &s * inv * &s;
            return (symmetrize(cov), false);
        }
    }
    let pinv = scaled
        .pseudo_inverse(1e-14)
        .unwrap_or_else(|_| DMatrix::zeros(n, n));
    (symmetrize(&s * pinv * &s), true)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}
