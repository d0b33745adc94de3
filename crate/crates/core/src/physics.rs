//! Closed-form physical models of the levitated-nanodiamond heat balance and
//! their exact inversions.
//!
//! Everything here works in strict SI units (Hz, K, Pa, m, W). Conversions to
//! GHz, hPa or cm⁻¹ happen only at I/O boundaries.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boltzmann constant (J/K).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Avogadro constant (1/mol).
pub const AVOGADRO: f64 = 6.022_140_76e23;
/// Molar gas constant N_A·k_B (J/(mol·K)).
pub const MOLAR_GAS_CONSTANT: f64 = AVOGADRO * BOLTZMANN;

/// Reference zero-field splitting of the default polynomial (Hz).
pub const TOYLI_A0: f64 = 2.8697e9;
pub const TOYLI_A1: f64 = 9.7e4;
pub const TOYLI_A2: f64 = -3.7e2;
pub const TOYLI_A3: f64 = 0.17;

/// Prefactor of the free-molecular damping formula for a sphere.
const DAMPING_PREFACTOR: f64 = 0.619;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("temperature {value} K outside valid range [{min}, {max}] K")]
    TemperatureOutOfRange { value: f64, min: f64, max: f64 },
    #[error("zero-field splitting {value} Hz outside attainable range [{min}, {max}] Hz")]
    FrequencyOutOfRange { value: f64, min: f64, max: f64 },
    #[error("polynomial is not strictly decreasing on [{min}, {max}] K (slope {slope} Hz/K at {at} K)")]
    NotMonotone { min: f64, max: f64, slope: f64, at: f64 },
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("σ/V = {ratio} m⁻¹ is too large for ε′ = {eps_real}: no real ε″ solution")]
    NoDielectricSolution { ratio: f64, eps_real: f64 },
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

fn require(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<()> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(PhysicsError::InvalidParameter {
            name,
            value,
            reason,
        })
    }
}

/// Cubic model of the NV zero-field splitting D(T), plus a particle-specific
/// strain offset. This is the thermometer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZfsPolynomial {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub d_strain: f64,
    t_min: f64,
    t_max: f64,
}

impl Default for ZfsPolynomial {
    fn default() -> Self {
        Self {
            a0: TOYLI_A0,
            a1: TOYLI_A1,
            a2: TOYLI_A2,
            a3: TOYLI_A3,
            d_strain: 0.0,
            t_min: 150.0,
            t_max: 1000.0,
        }
    }
}

impl ZfsPolynomial {
    /// Builds a polynomial, rejecting ranges where D(T) is not strictly
    /// decreasing.
    pub fn new(coefficients: [f64; 4], d_strain: f64, range: (f64, f64)) -> Result<Self> {
        let (t_min, t_max) = range;
        require("t_min", t_min, t_min > 0.0, "must be positive")?;
        require("t_max", t_max, t_max > t_min, "must exceed t_min")?;
        for (name, c) in ["a0", "a1", "a2", "a3"].into_iter().zip(coefficients) {
            require(name, c, true, "must be finite")?;
        }
        require("d_strain", d_strain, true, "must be finite")?;
        let poly = Self {
            a0: coefficients[0],
            a1: coefficients[1],
            a2: coefficients[2],
            a3: coefficients[3],
            d_strain,
            t_min,
            t_max,
        };
        // D' is quadratic: its maximum on a closed interval sits at an endpoint
        // or at the vertex.
        let mut candidates = vec![t_min, t_max];
        if poly.a3 != 0.0 {
            let vertex = -poly.a2 / (3.0 * poly.a3);
            if vertex > t_min && vertex < t_max {
                candidates.push(vertex);
            }
        }
        for t in candidates {
            let slope = poly.slope_unchecked(t);
            if !(slope < 0.0) {
                return Err(PhysicsError::NotMonotone {
                    min: t_min,
                    max: t_max,
                    slope,
                    at: t,
                });
            }
        }
        Ok(poly)
    }

    pub fn with_strain(mut self, d_strain: f64) -> Self {
        self.d_strain = d_strain;
        self
    }

    pub fn valid_range(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.a0, self.a1, self.a2, self.a3]
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(PhysicsError::TemperatureOutOfRange {
                value: t,
                min: self.t_min,
                max: self.t_max,
            })
        }
    }

    /// Temperature-dependent part a1·T + a2·T² + a3·T³ (no constant, no strain).
    pub fn shift_unchecked(&self, t: f64) -> f64 {
        t * (self.a1 + t * (self.a2 + t * self.a3))
    }

    /// D(T) without range checks; used inside fits where the iterate may
    /// wander outside the calibrated range.
    pub fn eval_unchecked(&self, t: f64) -> f64 {
        self.d_strain + self.a0 + self.shift_unchecked(t)
    }

    pub fn slope_unchecked(&self, t: f64) -> f64 {
        self.a1 + t * (2.0 * self.a2 + 3.0 * self.a3 * t)
    }

    /// Attainable D over the valid range, as (D(T_max), D(T_min)).
    pub fn attainable_range(&self) -> (f64, f64) {
        (self.eval_unchecked(self.t_max), self.eval_unchecked(self.t_min))
    }
}

/// D(T) including the strain offset.
pub fn eval_zfs(poly: &ZfsPolynomial, t: f64) -> Result<f64> {
    poly.check_range(t)?;
    Ok(poly.eval_unchecked(t))
}

/// dD/dT; strictly negative on the valid range.
pub fn zfs_slope(poly: &ZfsPolynomial, t: f64) -> Result<f64> {
    poly.check_range(t)?;
    Ok(poly.slope_unchecked(t))
}

/// Temperature reading for a measured zero-field splitting.
///
/// Safeguarded Newton iteration inside a shrinking bracket; falls back to
/// bisection whenever the Newton step leaves the bracket.
pub fn invert_zfs(poly: &ZfsPolynomial, d_measured: f64) -> Result<f64> {
    let (d_low, d_high) = poly.attainable_range();
    if !(d_measured >= d_low && d_measured <= d_high) {
        return Err(PhysicsError::FrequencyOutOfRange {
            value: d_measured,
            min: d_low,
            max: d_high,
        });
    }
    // g(T) = D(T) - d is decreasing: g(lo) >= 0 >= g(hi).
    let g = |t: f64| poly.eval_unchecked(t) - d_measured;
    let (mut lo, mut hi) = (poly.t_min, poly.t_max);
    if g(lo) == 0.0 {
        return Ok(lo);
    }
    if g(hi) == 0.0 {
        return Ok(hi);
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let value = g(t);
        if value == 0.0 {
            return Ok(t);
        }
        if value > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = t - value / poly.slope_unchecked(t);
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - t).abs();
        t = next;
        if step < 1e-11 || hi - lo < 1e-11 {
            break;
        }
    }
    Ok(t)
}

/// Temperature uncertainty from a frequency uncertainty, σ_D / |dD/dT|.
pub fn temperature_uncertainty(sigma_d: f64, poly: &ZfsPolynomial, t: f64) -> Result<f64> {
    require("sigma_d", sigma_d, sigma_d >= 0.0, "must be non-negative")?;
    Ok(sigma_d / zfs_slope(poly, t)?.abs())
}

/// Ambient gas surrounding the trapped particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasConditions {
    /// Ambient temperature (K).
    pub t0: f64,
    /// Mean thermal speed of the gas molecules (m/s).
    pub c_bar: f64,
    /// Specific-heat ratio.
    pub gamma: f64,
    /// Thermal accommodation coefficient.
    pub alpha_acc: f64,
    /// Pressure (Pa).
    pub p_gas: f64,
    /// Molar mass (kg/mol).
    pub molar_mass: f64,
}

impl GasConditions {
    pub fn new(t0: f64, c_bar: f64, gamma: f64, alpha_acc: f64, p_gas: f64, molar_mass: f64) -> Result<Self> {
        let gas = Self {
            t0,
            c_bar,
            gamma,
            alpha_acc,
            p_gas,
            molar_mass,
        };
        gas.validate()?;
        Ok(gas)
    }

    /// Default air at 294 K and the given pressure.
    pub fn air(p_gas: f64) -> Result<Self> {
        Self::new(294.0, 503.0, 7.0 / 5.0, 1.0, p_gas, 0.02897)
    }

    pub fn at_pressure(mut self, p_gas: f64) -> Result<Self> {
        self.p_gas = p_gas;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        require("t0", self.t0, self.t0 > 0.0, "must be positive")?;
        require("c_bar", self.c_bar, self.c_bar > 0.0, "must be positive")?;
        require("gamma", self.gamma, self.gamma > 1.0, "must exceed 1")?;
        require(
            "alpha_acc",
            self.alpha_acc,
            self.alpha_acc > 0.0 && self.alpha_acc <= 1.0,
            "must lie in (0, 1]",
        )?;
        require("p_gas", self.p_gas, self.p_gas > 0.0, "must be positive")?;
        require("molar_mass", self.molar_mass, self.molar_mass > 0.0, "must be positive")
    }

    /// (γ+1)/(γ−1).
    fn heat_capacity_factor(&self) -> f64 {
        (self.gamma + 1.0) / (self.gamma - 1.0)
    }
}

/// Spherical particle described by its hydrodynamic radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleGeometry {
    pub r_hydro: f64,
    pub density: f64,
}

impl ParticleGeometry {
    pub fn new(r_hydro: f64, density: f64) -> Result<Self> {
        require("r_hydro", r_hydro, r_hydro > 0.0, "must be positive")?;
        require("density", density, density > 0.0, "must be positive")?;
        Ok(Self { r_hydro, density })
    }

    /// Diamond sphere (3500 kg/m³).
    pub fn diamond(r_hydro: f64) -> Result<Self> {
        Self::new(r_hydro, 3500.0)
    }

    pub fn surface(&self) -> f64 {
        4.0 * PI * self.r_hydro * self.r_hydro
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.r_hydro.powi(3)
    }

    pub fn mass(&self) -> f64 {
        self.density * self.volume()
    }
}

/// Complex relative permittivity ε′ + iε″.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DielectricConstant {
    pub eps_real: f64,
    pub eps_imag: f64,
}

impl DielectricConstant {
    pub fn new(eps_real: f64, eps_imag: f64) -> Result<Self> {
        require("eps_real", eps_real, eps_real > 1.0, "must exceed 1")?;
        require("eps_imag", eps_imag, eps_imag >= 0.0, "must be non-negative")?;
        Ok(Self { eps_real, eps_imag })
    }

    /// Diamond at 1550 nm with the given loss.
    pub fn diamond(eps_imag: f64) -> Result<Self> {
        Self::new(5.7, eps_imag)
    }

    fn complex(&self) -> Complex64 {
        Complex64::new(self.eps_real, self.eps_imag)
    }
}

/// Power absorbed from the trapping beam, σ_abs·I.
pub fn absorbed_power(sigma_abs: f64, intensity: f64) -> Result<f64> {
    require("sigma_abs", sigma_abs, sigma_abs >= 0.0, "must be non-negative")?;
    require("intensity", intensity, intensity >= 0.0, "must be non-negative")?;
    Ok(sigma_abs * intensity)
}

/// Free-molecular gas conduction from a particle at `t_int`. Negative when
/// the particle is colder than the gas.
pub fn conduction_power(geom: &ParticleGeometry, gas: &GasConditions, t_int: f64) -> Result<f64> {
    gas.validate()?;
    require("t_int", t_int, t_int > 0.0, "must be positive")?;
    Ok(gas.alpha_acc * geom.surface() * gas.p_gas * gas.c_bar / (8.0 * gas.t0)
        * gas.heat_capacity_factor()
        * (t_int - gas.t0))
}

/// Steady-state internal temperature T₀ + β·I/p.
pub fn equilibrium_temperature(beta_heat: f64, intensity: f64, gas: &GasConditions) -> Result<f64> {
    gas.validate()?;
    require("beta_heat", beta_heat, true, "must be finite")?;
    require("intensity", intensity, intensity >= 0.0, "must be non-negative")?;
    Ok(gas.t0 + beta_heat * intensity / gas.p_gas)
}

/// Heating coefficient from an absorption cross-section, consistent with the
/// conduction law and the equilibrium temperature:
/// β = 8T₀σ/(α·S·c̄)·(γ−1)/(γ+1).
pub fn beta_from_sigma(sigma_abs: f64, geom: &ParticleGeometry, gas: &GasConditions) -> Result<f64> {
    require("sigma_abs", sigma_abs, sigma_abs >= 0.0, "must be non-negative")?;
    gas.validate()?;
    Ok(8.0 * gas.t0 * sigma_abs / (gas.alpha_acc * geom.surface() * gas.c_bar) / gas.heat_capacity_factor())
}

/// The heating-coefficient formula with the prefactor 2T₀/c̄ as it is usually
/// printed. It is a factor 4 below [`beta_from_sigma`] and does not close the
/// energy balance; kept for documentation and comparison only.
pub fn beta_from_sigma_as_printed(sigma_abs: f64, geom: &ParticleGeometry, gas: &GasConditions) -> Result<f64> {
    require("sigma_abs", sigma_abs, sigma_abs >= 0.0, "must be non-negative")?;
    gas.validate()?;
    Ok(sigma_abs / geom.surface() * 2.0 * gas.t0 / gas.c_bar / gas.heat_capacity_factor())
}

/// Absorption cross-section from a heating coefficient and a hydrodynamic
/// radius, σ = α·β·r²·(πc̄/2T₀)·(γ+1)/(γ−1).
pub fn sigma_from_beta_radius(beta_heat: f64, r_hydro: f64, gas: &GasConditions) -> Result<f64> {
    require("beta_heat", beta_heat, beta_heat >= 0.0, "must be non-negative")?;
    require("r_hydro", r_hydro, r_hydro > 0.0, "must be positive")?;
    gas.validate()?;
    Ok(gas.alpha_acc * beta_heat * r_hydro * r_hydro * PI * gas.c_bar / (2.0 * gas.t0)
        * gas.heat_capacity_factor())
}

/// Rayleigh-regime absorption cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayleighAbsorption {
    pub sigma_abs: f64,
    /// Set when r_hydro > λ/10 and the small-particle approximation is
    /// questionable.
    pub outside_rayleigh: bool,
}

/// Im((ε−1)/(ε+2)) computed in complex arithmetic.
fn clausius_mossotti_loss(eps: &DielectricConstant) -> f64 {
    let e = eps.complex();
    ((e - 1.0) / (e + 2.0)).im
}

pub fn rayleigh_sigma(geom: &ParticleGeometry, eps: &DielectricConstant, wavelength: f64) -> Result<RayleighAbsorption> {
    require("wavelength", wavelength, wavelength > 0.0, "must be positive")?;
    let sigma_abs = 6.0 * PI * geom.volume() / wavelength * clausius_mossotti_loss(eps);
    Ok(RayleighAbsorption {
        sigma_abs,
        outside_rayleigh: geom.r_hydro > wavelength / 10.0,
    })
}

/// Inverts the Rayleigh cross-section per unit volume for ε″.
///
/// With q = (σ/V)·λ/(6π) the loss satisfies q·ε″² − 3ε″ + q(ε′+2)² = 0; the
/// physical branch is the smaller root.
pub fn epsilon_imag_from_sigma_ratio(sigma_over_volume: f64, eps_real: f64, wavelength: f64) -> Result<f64> {
    require("sigma_over_volume", sigma_over_volume, sigma_over_volume >= 0.0, "must be non-negative")?;
    require("eps_real", eps_real, eps_real > 1.0, "must exceed 1")?;
    require("wavelength", wavelength, wavelength > 0.0, "must be positive")?;
    let q = sigma_over_volume * wavelength / (6.0 * PI);
    let c = (eps_real + 2.0).powi(2);
    let disc = 9.0 - 4.0 * q * q * c;
    if disc < 0.0 {
        return Err(PhysicsError::NoDielectricSolution {
            ratio: sigma_over_volume,
            eps_real,
        });
    }
    // Cancellation-free form of (3 − √disc)/(2q).
    Ok(2.0 * q * c / (3.0 + disc.sqrt()))
}

/// Bulk intensity absorption coefficient 4πκ/λ with κ = Im √ε.
pub fn bulk_absorption_coefficient(eps: &DielectricConstant, wavelength: f64) -> Result<f64> {
    require("wavelength", wavelength, wavelength > 0.0, "must be positive")?;
    let kappa = eps.complex().sqrt().im;
    Ok(4.0 * PI * kappa / wavelength)
}

/// Gas damping rate of a sphere in the free-molecular regime.
pub fn damping_rate(r: f64, gas: &GasConditions, density: f64) -> Result<f64> {
    require("r", r, r > 0.0, "must be positive")?;
    require("density", density, density > 0.0, "must be positive")?;
    gas.validate()?;
    Ok(damping_constant(gas, density) * gas.p_gas / r)
}

/// Hydrodynamic radius whose damping matches `gamma`.
pub fn radius_from_damping(gamma: f64, gas: &GasConditions, density: f64) -> Result<f64> {
    require("gamma", gamma, gamma > 0.0, "must be positive")?;
    require("density", density, density > 0.0, "must be positive")?;
    gas.validate()?;
    Ok(damping_constant(gas, density) * gas.p_gas / gamma)
}

fn damping_constant(gas: &GasConditions, density: f64) -> f64 {
    DAMPING_PREFACTOR * 9.0 / ((2.0 * PI).sqrt() * density)
        * (gas.molar_mass / (MOLAR_GAS_CONSTANT * gas.t0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsrSensitivityInputs {
    /// ESR linewidth (Hz).
    pub linewidth: f64,
    pub contrast: f64,
    /// Photon count rate (1/s).
    pub count_rate: f64,
    /// Integration time per frequency point (s).
    pub dwell_per_point: f64,
}

impl EsrSensitivityInputs {
    pub fn validate(&self) -> Result<()> {
        require("linewidth", self.linewidth, self.linewidth > 0.0, "must be positive")?;
        require(
            "contrast",
            self.contrast,
            self.contrast > 0.0 && self.contrast < 1.0,
            "must lie in (0, 1)",
        )?;
        require("count_rate", self.count_rate, self.count_rate > 0.0, "must be positive")?;
        require(
            "dwell_per_point",
            self.dwell_per_point,
            self.dwell_per_point > 0.0,
            "must be positive",
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsrSensitivity {
    /// η_T in K/√Hz.
    pub sensitivity: f64,
    /// η_T/√t for the per-point dwell t, in K.
    pub resolution: f64,
}

/// Shot-noise-limited ESR temperature sensitivity and the resulting
/// resolution for one dwell period.
pub fn esr_sensitivity(inp: &EsrSensitivityInputs, slope: f64) -> Result<EsrSensitivity> {
    inp.validate()?;
    require("slope", slope, slope != 0.0, "must be non-zero")?;
    let sensitivity = inp.linewidth / (inp.contrast * inp.count_rate.sqrt() * slope.abs());
    Ok(EsrSensitivity {
        sensitivity,
        resolution: sensitivity / inp.dwell_per_point.sqrt(),
    })
}
