//! Least-squares machinery and the named fits built on it: temperature
//! calibration, the joint heating fit over intensity and pressure, and the
//! power-law ensemble fit with its confidence band.

mod calibration;
mod heating;
mod power_law;
mod solver;

pub use calibration::{fit_calibration_alpha, CalibrationFit};
pub use heating::{fit_heating, heating_problem, HeatingFitResult, HeatingPoint};
pub use power_law::{
    compare_exponents, confidence_band, fit_power_law, ExponentComparison, ExponentMode, PowerLawFit,
};
pub use solver::{
    covariance_from_jacobian, finite_difference_jacobian, least_squares_solve, CovarianceScaling, FitProblem,
    FitResult, Termination, Tolerances,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("residuals are not finite at the initial point")]
    NonFiniteResiduals,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parameter not identifiable: {0}")]
    Unidentifiable(String),
    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
}
