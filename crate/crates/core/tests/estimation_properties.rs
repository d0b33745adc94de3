use nanotherm::estimation::{
    compare_exponents, fit_calibration_alpha, fit_heating, fit_power_law, heating_problem, least_squares_solve,
    ExponentMode, FitProblem, HeatingPoint, Tolerances,
};
use nanotherm::physics::{GasConditions, ZfsPolynomial};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn noisy_heating(seed: u64, beta: f64, strain: f64, sigma_d: f64) -> (Vec<HeatingPoint>, GasConditions) {
    let gas = GasConditions::air(3000.0).unwrap();
    let poly = ZfsPolynomial::default().with_strain(strain);
    let noise = Normal::new(0.0, sigma_d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for p in [2000.0, 3000.0, 5000.0] {
        for frac in [1.0 / 3.0, 2.0 / 3.0, 1.0] {
            let intensity = frac * 4e10;
            let t = gas.t0 + beta * intensity / p;
            points.push(HeatingPoint {
                intensity,
                pressure: p,
                d_measured: poly.eval_unchecked(t) + noise.sample(&mut rng),
                sigma_d,
            });
        }
    }
    (points, gas)
}

#[test]
fn heating_optimum_satisfies_normal_equations() {
    let poly = ZfsPolynomial::default();
    for seed in 0..10 {
        let (points, gas) = noisy_heating(seed, 1.5e-5, 3e5, 60e3);
        let fit = fit_heating(&points, &poly, &gas, Tolerances::default()).unwrap();
        let problem = heating_problem(&points, &poly, &gas).unwrap();
        let p = [fit.beta_heat, fit.d_strain];
        let r = problem.evaluate(&p);
        let jac = problem.jacobian(&p);
        let r_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..2 {
            let col = jac.column(j);
            let g: f64 = col.iter().zip(&r).map(|(a, b)| a * b).sum();
            let cosine = g.abs() / (col.norm() * r_norm);
            assert!(cosine < 1e-8, "seed {seed}, column {j}: {cosine:e}");
        }
    }
}

#[test]
fn heating_uncertainty_matches_scatter() {
    let poly = ZfsPolynomial::default();
    let fits: Vec<_> = (0..400)
        .map(|s| {
            let (points, gas) = noisy_heating(100 + s, 1.5e-5, 3e5, 60e3);
            fit_heating(&points, &poly, &gas, Tolerances::default()).unwrap()
        })
        .collect();
    let betas: Vec<f64> = fits.iter().map(|f| f.beta_heat).collect();
    let n = betas.len() as f64;
    let mean = betas.iter().sum::<f64>() / n;
    let sd = (betas.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let reported = fits.iter().map(|f| f.beta_std()).sum::<f64>() / n;
    assert!((mean - 1.5e-5).abs() < 3.0 * sd / n.sqrt());
    assert!((reported / sd - 1.0).abs() < 0.12, "{reported} vs {sd}");
}

fn decay_data() -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t: Vec<f64> = (0..60).map(|i| i as f64 * 0.05).collect();
    let y = t.iter().map(|&t| 4.0 * (-t / 0.7).exp() + 0.5 + rng.random_range(-0.05..0.05)).collect();
    (t, y)
}

/// Rescaling each parameter by a constant must rescale the estimate and its
/// covariance and leave the residuals alone.
#[test]
fn solver_is_scale_equivariant() {
    let (t, y) = decay_data();
    let model = |a: f64, tau: f64, c: f64| -> Vec<f64> {
        t.iter().zip(&y).map(|(&t, &y)| y - (a * (-t / tau).exp() + c)).collect()
    };
    let base = FitProblem::new(&["a", "tau", "c"], &[1.0, 1.0, 0.0], |p| model(p[0], p[1], p[2]));
    let scale = [1e6, 1e-4, 1e3];
    let scaled = FitProblem::new(&["a", "tau", "c"], &[1.0 * scale[0], 1.0 * scale[1], 0.0], |p| {
        model(p[0] / scale[0], p[1] / scale[1], p[2] / scale[2])
    });
    let f1 = least_squares_solve(&base).unwrap();
    let f2 = least_squares_solve(&scaled).unwrap();
    assert!(f1.converged && f2.converged);
    for i in 0..3 {
        let v = f2.parameters[i] / scale[i];
        assert!(((v - f1.parameters[i]) / f1.parameters[i]).abs() < 1e-8, "param {i}");
    }
    let (c1, c2) = (f1.covariance.unwrap(), f2.covariance.unwrap());
    for i in 0..3 {
        for j in 0..3 {
            let v = c2[i][j] / (scale[i] * scale[j]);
            assert!(((v - c1[i][j]) / c1[i][j]).abs() < 1e-6, "cov {i}{j}");
        }
    }
    assert!((f1.residual_norm / f2.residual_norm - 1.0).abs() < 1e-10);
}

#[test]
fn calibration_recovers_alpha_and_offset() {
    let reference = ZfsPolynomial::default();
    for alpha in [0.9, 1.0, 1.07] {
        let shifted = reference.with_strain(4e5);
        let pairs: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let t = 300.0 + 40.0 * i as f64;
                (t, shifted.eval_unchecked(alpha * t))
            })
            .collect();
        let fit = fit_calibration_alpha(&pairs, &reference, Tolerances::default()).unwrap();
        assert!((fit.alpha / alpha - 1.0).abs() < 1e-8);
        assert!((fit.d_strain - 4e5).abs() < 1e-2);
    }
}

/// Many synthetic ensembles: the free exponent should be unbiased and its
/// reported standard error should match the normal-theory spread.
#[test]
fn free_exponent_follows_normal_theory() {
    let sigma = 0.4;
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut estimates = Vec::new();
    let mut reported = Vec::new();
    let mut prefers_three = 0;
    for s in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let records: Vec<(f64, f64)> = (0..46)
            .map(|_| {
                let r = (rng.random_range((30e-9f64).ln()..(300e-9f64).ln())).exp();
                (r, 2e3 * r.powi(3) * f64::exp(noise.sample(&mut rng)))
            })
            .collect();
        let cmp = compare_exponents(&records).unwrap();
        estimates.push(cmp.free.exponent);
        reported.push(cmp.free.exponent_std.unwrap());
        if cmp.preferred_fixed == 3 {
            prefers_three += 1;
        }
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = reported.iter().sum::<f64>() / n;
    assert!((mean - 3.0).abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
    assert!((se / sd - 1.0).abs() < 0.1, "{se} vs {sd}");
    assert!(prefers_three as f64 / n > 0.95);
}

proptest! {
    #[test]
    fn exact_power_law_is_recovered(log_a in -30.0..30.0f64, n in 1.0..4.0f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 10f64.powf(log_a);
        let records: Vec<(f64, f64)> = (0..20)
            .map(|_| {
                let r = rng.random_range(20e-9..400e-9f64);
                (r, a * r.powf(n))
            })
            .collect();
        let fit = fit_power_law(&records, ExponentMode::Free).unwrap();
        prop_assert!((fit.exponent - n).abs() < 1e-9);
        prop_assert!((fit.amplitude / a - 1.0).abs() < 1e-6);
        prop_assert!(fit.sigma_log < 1e-9);
    }

    #[test]
    fn band_brackets_amplitude(seed in any::<u64>(), sigma in 0.01..1.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let records: Vec<(f64, f64)> = (0..30)
            .map(|_| {
                let r = rng.random_range(40e-9..160e-9f64);
                (r, 4e3 * r.powi(3) * f64::exp(noise.sample(&mut rng)))
            })
            .collect();
        let fit = fit_power_law(&records, ExponentMode::Fixed(3.0)).unwrap();
        prop_assert!(fit.a_minus < fit.amplitude && fit.amplitude < fit.a_plus);
        prop_assert!((fit.a_plus / fit.amplitude * fit.a_minus / fit.amplitude - 1.0).abs() < 1e-12);
        prop_assert!(((fit.a_plus / fit.amplitude).ln() - 2.0 * fit.sigma_log).abs() < 1e-12);
    }
}
