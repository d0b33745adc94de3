use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{moving_average, quantile, strictly_increasing, Result, SpectralError};
use crate::estimation::{least_squares_solve, CovarianceScaling, FitProblem, FitResult, Tolerances};

/// Bi-Lorentzian ESR line: two dips at D ∓ E on a flat count rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsrLineParams {
    /// Zero-field splitting D (Hz).
    pub d_center: f64,
    /// Strain splitting E (Hz); the dips sit at D ± E.
    pub e_split: f64,
    pub contrast_minus: f64,
    pub contrast_plus: f64,
    /// FWHM of the lower-frequency dip (Hz).
    pub width_minus: f64,
    /// FWHM of the upper-frequency dip (Hz).
    pub width_plus: f64,
    /// Off-resonance count rate (1/s).
    pub base_rate: f64,
}

impl EsrLineParams {
    /// Same contrast and width on both dips.
    pub fn symmetric(d_center: f64, e_split: f64, contrast: f64, width: f64, base_rate: f64) -> Self {
        Self {
            d_center,
            e_split,
            contrast_minus: contrast,
            contrast_plus: contrast,
            width_minus: width,
            width_plus: width,
            base_rate,
        }
    }

    pub fn f_minus(&self) -> f64 {
        self.d_center - self.e_split
    }

    pub fn f_plus(&self) -> f64 {
        self.d_center + self.e_split
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SpectralError::InvalidParameters(msg.to_string()));
        let all = [
            self.d_center,
            self.e_split,
            self.contrast_minus,
            self.contrast_plus,
            self.width_minus,
            self.width_plus,
            self.base_rate,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite ESR parameter");
        }
        if self.e_split < 0.0 {
            return bad("e_split must be non-negative");
        }
        if !(0.0..1.0).contains(&self.contrast_minus) || !(0.0..1.0).contains(&self.contrast_plus) {
            return bad("contrasts must lie in [0, 1)");
        }
        if self.contrast_minus + self.contrast_plus >= 1.0 {
            return bad("combined contrast must stay below 1");
        }
        if self.width_minus <= 0.0 || self.width_plus <= 0.0 {
            return bad("widths must be positive");
        }
        if self.base_rate <= 0.0 {
            return bad("base_rate must be positive");
        }
        Ok(())
    }
}

/// Unit-peak Lorentzian with full width at half maximum `fwhm`.
pub fn lorentzian(f: f64, f0: f64, fwhm: f64) -> f64 {
    let x = 2.0 * (f - f0) / fwhm;
    1.0 / (1.0 + x * x)
}

/// Expected count rate at microwave frequency `f`.
pub fn esr_model(params: &EsrLineParams, f: f64) -> f64 {
    params.base_rate
        * (1.0
            - params.contrast_minus * lorentzian(f, params.f_minus(), params.width_minus)
            - params.contrast_plus * lorentzian(f, params.f_plus(), params.width_plus))
}

/// Analytic gradient of [`esr_model`] with respect to
/// (D, E, 𝒞₋, 𝒞₊, w₋, w₊, R).
pub fn esr_model_gradient(params: &EsrLineParams, f: f64) -> [f64; 7] {
    let r = params.base_rate;
    let dip = |f0: f64, w: f64| {
        let x = 2.0 * (f - f0) / w;
        let l = 1.0 / (1.0 + x * x);
        // dL/df0 and dL/dw
        let dl_df0 = l * l * 2.0 * x * 2.0 / w;
        let dl_dw = l * l * 2.0 * x * x / w;
        (l, dl_df0, dl_dw)
    };
    let (lm, lm_f0, lm_w) = dip(params.f_minus(), params.width_minus);
    let (lp, lp_f0, lp_w) = dip(params.f_plus(), params.width_plus);
    let (cm, cp) = (params.contrast_minus, params.contrast_plus);
    [
        -r * (cm * lm_f0 + cp * lp_f0),
        -r * (-cm * lm_f0 + cp * lp_f0),
        -r * lm,
        -r * lp,
        -r * cm * lm_w,
        -r * cp * lp_w,
        1.0 - cm * lm - cp * lp,
    ]
}

/// Photon counts recorded on a microwave frequency sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrSpectrum {
    frequencies: Vec<f64>,
    counts: Vec<u64>,
    dwell_per_point: f64,
}

impl EsrSpectrum {
    pub fn new(frequencies: Vec<f64>, counts: Vec<u64>, dwell_per_point: f64) -> Result<Self> {
        if frequencies.len() != counts.len() {
            return Err(SpectralError::InvalidSpectrum(format!(
                "{} frequencies but {} counts",
                frequencies.len(),
                counts.len()
            )));
        }
        if !strictly_increasing(&frequencies) {
            return Err(SpectralError::InvalidSpectrum(
                "frequencies must be finite and strictly increasing".into(),
            ));
        }
        if !(dwell_per_point > 0.0 && dwell_per_point.is_finite()) {
            return Err(SpectralError::InvalidSpectrum("dwell must be positive".into()));
        }
        Ok(Self {
            frequencies,
            counts,
            dwell_per_point,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn dwell_per_point(&self) -> f64 {
        self.dwell_per_point
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// `points` equally spaced frequencies spanning `span` around `center`.
pub fn scan_grid(center: f64, span: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![center; points.min(1)];
    }
    let start = center - 0.5 * span;
    let step = span / (points - 1) as f64;
    (0..points).map(|i| start + step * i as f64).collect()
}

/// Shot-noise limited spectrum: Poisson counts with mean esr_model·dwell.
pub fn synthesize_esr(params: &EsrLineParams, scan: &[f64], dwell: f64, seed: u64) -> Result<EsrSpectrum> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = scan
        .iter()
        .map(|&f| {
            let mean = esr_model(params, f) * dwell;
            if mean > 0.0 {
                Poisson::new(mean).map(|d| d.sample(&mut rng) as u64).map_err(|e| {
                    SpectralError::InvalidParameters(format!("Poisson mean {mean}: {e}"))
                })
            } else {
                Ok(0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    EsrSpectrum::new(scan.to_vec(), counts, dwell)
}

/// Noise-free spectrum: counts are the expected values rounded to integers.
pub fn synthesize_esr_expected(params: &EsrLineParams, scan: &[f64], dwell: f64) -> Result<EsrSpectrum> {
    params.validate()?;
    let counts = scan
        .iter()
        .map(|&f| (esr_model(params, f) * dwell).round() as u64)
        .collect();
    EsrSpectrum::new(scan.to_vec(), counts, dwell)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrFit {
    pub params: EsrLineParams,
    /// Parameter names in covariance order.
    pub names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    /// Standard uncertainty of D (Hz).
    pub sigma_d: f64,
    /// The two dips could not be resolved; a single Lorentzian was fitted and
    /// E is reported as 0.
    pub merged: bool,
    pub chi_squared: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl EsrFit {
    pub fn reduced_chi_squared(&self) -> f64 {
        self.chi_squared / self.dof.max(1) as f64
    }
}

const MIN_POINTS: usize = 8;

struct Dip {
    index: usize,
    depth: f64,
    prominence: f64,
}

/// Local minima of `s` with their topographic prominence.
fn minima(s: &[f64], baseline: f64) -> Vec<Dip> {
    let n = s.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        // Treat flat runs as a single candidate.
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let left_higher = i == 0 || s[i - 1] > s[i];
        let right_higher = j + 1 == n || s[j + 1] > s[i];
        if left_higher && right_higher && !(i == 0 && j + 1 == n) {
            let v = s[i];
            let mut left_max = v;
            for k in (0..i).rev() {
                if s[k] < v {
                    break;
                }
                left_max = left_max.max(s[k]);
            }
            let mut right_max = v;
            for &x in &s[j + 1..] {
                if x < v {
                    break;
                }
                right_max = right_max.max(x);
            }
            let at_edge = i == 0 || j + 1 == n;
            if !at_edge {
                out.push(Dip {
                    index: (i + j) / 2,
                    depth: baseline - v,
                    prominence: left_max.min(right_max) - v,
                });
            }
        }
        i = j + 1;
    }
    out
}

/// Walks from `start` in direction `step` until the smoothed signal rises
/// above `level`; returns the distance in Hz.
fn half_width(freqs: &[f64], s: &[f64], start: usize, level: f64, forward: bool) -> Option<f64> {
    let mut k = start;
    loop {
        if s[k] >= level {
            return Some((freqs[k] - freqs[start]).abs());
        }
        if forward {
            if k + 1 >= s.len() {
                return None;
            }
            k += 1;
        } else {
            if k == 0 {
                return None;
            }
            k -= 1;
        }
    }
}

fn esr_weights(counts: &[u64]) -> Vec<f64> {
    counts.iter().map(|&c| 1.0 / (c.max(1) as f64).sqrt()).collect()
}

fn fit_two_dips(
    spec: &EsrSpectrum,
    seed: &EsrLineParams,
    tolerances: Tolerances,
) -> Result<FitResult> {
    let freqs = spec.frequencies();
    let counts: Vec<f64> = spec.counts().iter().map(|&c| c as f64).collect();
    let weights = esr_weights(spec.counts());
    let dwell = spec.dwell_per_point();
    let (f_lo, f_hi) = (freqs[0], freqs[freqs.len() - 1]);
    let span = f_hi - f_lo;
    let min_step = freqs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let wscale = 1e-6 * seed.width_minus.max(seed.width_plus);

    let residuals = move |p: &[f64]| -> Vec<f64> {
        let params = EsrLineParams {
            d_center: p[0],
            e_split: p[1],
            contrast_minus: p[2],
            contrast_plus: p[3],
            width_minus: p[4],
            width_plus: p[5],
            base_rate: p[6],
        };
        freqs
            .iter()
            .zip(&counts)
            .zip(&weights)
            .map(|((&f, &c), &w)| (c - esr_model(&params, f) * dwell) * w)
            .collect()
    };
    let problem = FitProblem::new(
        &["d_center", "e_split", "contrast_minus", "contrast_plus", "width_minus", "width_plus", "base_rate"],
        &[
            seed.d_center,
            seed.e_split,
            seed.contrast_minus,
            seed.contrast_plus,
            seed.width_minus,
            seed.width_plus,
            seed.base_rate,
        ],
        residuals,
    )
    .with_bounds(0, f_lo, f_hi)
    .with_bounds(1, 0.0, span)
    .with_bounds(2, 0.0, 0.99)
    .with_bounds(3, 0.0, 0.99)
    .with_bounds(4, 0.1 * min_step, 2.0 * span)
    .with_bounds(5, 0.1 * min_step, 2.0 * span)
    .with_bounds(6, f64::MIN_POSITIVE, f64::INFINITY)
    .with_fd_floor(&[wscale, wscale, 1e-9, 1e-9, wscale, wscale, 1e-6 * seed.base_rate])
    .with_tolerances(tolerances)
    .with_covariance(CovarianceScaling::Absolute);
    Ok(least_squares_solve(&problem)?)
}

fn fit_one_dip(
    spec: &EsrSpectrum,
    center: f64,
    contrast: f64,
    width: f64,
    rate: f64,
    tolerances: Tolerances,
) -> Result<FitResult> {
    let freqs = spec.frequencies();
    let counts: Vec<f64> = spec.counts().iter().map(|&c| c as f64).collect();
    let weights = esr_weights(spec.counts());
    let dwell = spec.dwell_per_point();
    let (f_lo, f_hi) = (freqs[0], freqs[freqs.len() - 1]);
    let span = f_hi - f_lo;
    let min_step = freqs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let wscale = 1e-6 * width;
    let residuals = move |p: &[f64]| -> Vec<f64> {
        freqs
            .iter()
            .zip(&counts)
            .zip(&weights)
            .map(|((&f, &c), &w)| (c - p[3] * dwell * (1.0 - p[1] * lorentzian(f, p[0], p[2]))) * w)
            .collect()
    };
    let problem = FitProblem::new(
        &["d_center", "contrast", "width", "base_rate"],
        &[center, contrast, width, rate],
        residuals,
    )
    .with_bounds(0, f_lo, f_hi)
    .with_bounds(1, 0.0, 0.99)
    .with_bounds(2, 0.1 * min_step, 2.0 * span)
    .with_bounds(3, f64::MIN_POSITIVE, f64::INFINITY)
    .with_fd_floor(&[wscale, 1e-9, wscale, 1e-6 * rate])
    .with_tolerances(tolerances)
    .with_covariance(CovarianceScaling::Absolute);
    Ok(least_squares_solve(&problem)?)
}

fn params_from(fit: &FitResult) -> EsrLineParams {
    let p = &fit.parameters;
    EsrLineParams {
        d_center: p[0],
        e_split: p[1],
        contrast_minus: p[2],
        contrast_plus: p[3],
        width_minus: p[4],
        width_plus: p[5],
        base_rate: p[6],
    }
}

fn accept_two_dip(fit: &FitResult, spec: &EsrSpectrum) -> bool {
    let freqs = spec.frequencies();
    let (f_lo, f_hi) = (freqs[0], freqs[freqs.len() - 1]);
    let p = params_from(fit);
    fit.converged
        && p.e_split > 0.0
        && p.f_minus() >= f_lo
        && p.f_plus() <= f_hi
        && p.contrast_minus > 0.0
        && p.contrast_plus > 0.0
        && p.validate().is_ok()
}

/// Bi-Lorentzian least-squares fit of an ESR spectrum.
///
/// Starting values come from a 5-point moving average: the two most
/// prominent minima seed f∓, their outer half-depth widths seed the
/// linewidths. When only one minimum is found a single Lorentzian is fitted
/// first and a two-dip refit is attempted from it; if that does not improve
/// χ² significantly the single-dip result is returned with E = 0 and
/// `merged` set.
pub fn fit_esr(spec: &EsrSpectrum, tolerances: Tolerances) -> Result<EsrFit> {
    if spec.len() < MIN_POINTS {
        return Err(SpectralError::InvalidSpectrum(format!(
            "ESR fit needs at least {MIN_POINTS} points, got {}",
            spec.len()
        )));
    }
    let freqs = spec.frequencies();
    let dwell = spec.dwell_per_point();
    let raw: Vec<f64> = spec.counts().iter().map(|&c| c as f64).collect();
    let smooth = moving_average(&raw, 2);
    let baseline = quantile(&smooth, 0.9);
    if baseline <= 0.0 {
        return Err(SpectralError::FitFailure("no counts recorded".into()));
    }
    let noise = baseline.sqrt();
    let deepest = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    if baseline - deepest <= 2.0 * noise {
        return Err(SpectralError::FitFailure(format!(
            "no dip deeper than 2 shot-noise deviations (depth {:.1} counts, noise {:.1})",
            baseline - deepest,
            noise
        )));
    }
    let mut dips: Vec<Dip> = minima(&smooth, baseline)
        .into_iter()
        .filter(|d| d.prominence > 2.0 * noise && d.depth > 2.0 * noise)
        .collect();
    dips.sort_by(|a, b| b.prominence.partial_cmp(&a.prominence).unwrap());
    dips.truncate(2);
    dips.sort_by_key(|d| d.index);
    let rate = baseline / dwell;
    let span = freqs[freqs.len() - 1] - freqs[0];

    match dips.len() {
        0 => Err(SpectralError::FitFailure("no resolvable dip in the spectrum".into())),
        2 => {
            let (lo, hi) = (&dips[0], &dips[1]);
            let (f_m, f_p) = (freqs[lo.index], freqs[hi.index]);
            let e = 0.5 * (f_p - f_m);
            let w_m = half_width(freqs, &smooth, lo.index, baseline - 0.5 * lo.depth, false)
                .map(|h| 2.0 * h)
                .unwrap_or(e);
            let w_p = half_width(freqs, &smooth, hi.index, baseline - 0.5 * hi.depth, true)
                .map(|h| 2.0 * h)
                .unwrap_or(e);
            let seed = EsrLineParams {
                d_center: 0.5 * (f_m + f_p),
                e_split: e,
                contrast_minus: (lo.depth / baseline).min(0.45),
                contrast_plus: (hi.depth / baseline).min(0.45),
                width_minus: w_m.max(1e-3 * span),
                width_plus: w_p.max(1e-3 * span),
                base_rate: rate,
            };
            let fit = fit_two_dips(spec, &seed, tolerances)?;
            if !accept_two_dip(&fit, spec) {
                return Err(SpectralError::FitFailure(format!(
                    "two-dip fit did not converge to dips inside the scan ({:?})",
                    fit.termination
                )));
            }
            Ok(esr_fit_from_two(fit, spec.len()))
        }
        _ => {
            let d = &dips[0];
            let center = freqs[d.index];
            let level = baseline - 0.5 * d.depth;
            let left = half_width(freqs, &smooth, d.index, level, false);
            let right = half_width(freqs, &smooth, d.index, level, true);
            let width = match (left, right) {
                (Some(l), Some(r)) => l + r,
                (Some(h), None) | (None, Some(h)) => 2.0 * h,
                (None, None) => 0.25 * span,
            }
            .max(1e-3 * span);
            let single = fit_one_dip(spec, center, (d.depth / baseline).min(0.9), width, rate, tolerances)?;
            if !single.converged {
                return Err(SpectralError::FitFailure(format!(
                    "single-dip fit did not converge ({:?})",
                    single.termination
                )));
            }
            let s = &single.parameters;
            let seed = EsrLineParams {
                d_center: s[0],
                e_split: 0.25 * s[2],
                contrast_minus: (0.6 * s[1]).min(0.45),
                contrast_plus: (0.6 * s[1]).min(0.45),
                width_minus: 0.7 * s[2],
                width_plus: 0.7 * s[2],
                base_rate: s[3],
            };
            // A 3-parameter extension must lower χ² by more than this to be
            // believed.
            const DELTA_CHI2: f64 = 25.0;
            if let Ok(two) = fit_two_dips(spec, &seed, tolerances) {
                if accept_two_dip(&two, spec) && two.chi_squared() < single.chi_squared() - DELTA_CHI2 {
                    return Ok(esr_fit_from_two(two, spec.len()));
                }
            }
            let cov = single.covariance.clone().unwrap_or_default();
            let sigma_d = cov.first().map(|row| row[0].max(0.0).sqrt()).unwrap_or(f64::NAN);
            Ok(EsrFit {
                params: EsrLineParams {
                    d_center: s[0],
                    e_split: 0.0,
                    contrast_minus: s[1],
                    contrast_plus: 0.0,
                    width_minus: s[2],
                    width_plus: s[2],
                    base_rate: s[3],
                },
                names: single.names.clone(),
                covariance: cov,
                sigma_d,
                merged: true,
                chi_squared: single.chi_squared(),
                dof: spec.len() - 4,
                iterations: single.iterations,
            })
        }
    }
}

fn esr_fit_from_two(fit: FitResult, n: usize) -> EsrFit {
    let cov = fit.covariance.clone().expect("converged fits carry a covariance");
    EsrFit {
        params: params_from(&fit),
        names: fit.names.clone(),
        sigma_d: cov[0][0].max(0.0).sqrt(),
        covariance: cov,
        merged: false,
        chi_squared: fit.chi_squared(),
        dof: n - 7,
        iterations: fit.iterations,
    }
}
