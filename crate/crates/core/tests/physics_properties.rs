use std::f64::consts::PI;

use nanotherm::physics::{
    absorbed_power, beta_from_sigma, bulk_absorption_coefficient, conduction_power, damping_rate, epsilon_imag_from_sigma_ratio,
    equilibrium_temperature, eval_zfs, invert_zfs, radius_from_damping, rayleigh_sigma, sigma_from_beta_radius,
    DielectricConstant, GasConditions, ParticleGeometry, ZfsPolynomial,
};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

prop_compose! {
    fn gas()(t0 in 250.0..350.0f64, c_bar in 300.0..1800.0f64, gamma in 1.1..1.7f64,
             alpha in 0.3..=1.0f64, p in 100.0..5000.0f64, m in 0.002..0.05f64) -> GasConditions {
        GasConditions::new(t0, c_bar, gamma, alpha, p, m).unwrap()
    }
}

proptest! {
    #[test]
    fn zfs_strictly_decreasing(a in 150.0..1000.0f64, b in 150.0..1000.0f64) {
        prop_assume!(a != b);
        let poly = ZfsPolynomial::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(eval_zfs(&poly, lo).unwrap() > eval_zfs(&poly, hi).unwrap());
    }

    #[test]
    fn inversion_is_identity(t in 150.0..=1000.0f64, strain in -5e6..5e6f64) {
        let poly = ZfsPolynomial::default().with_strain(strain);
        let back = invert_zfs(&poly, eval_zfs(&poly, t).unwrap()).unwrap();
        prop_assert!((back - t).abs() < 1e-6);
    }

    #[test]
    fn energy_balance_closes(g in gas(), r in 20e-9..300e-9f64, log_sigma in -20.0..-15.0f64, log_i in 9.0..11.0f64) {
        let geom = ParticleGeometry::diamond(r).unwrap();
        let sigma = 10f64.powf(log_sigma);
        let intensity = 10f64.powf(log_i);
        let t = equilibrium_temperature(beta_from_sigma(sigma, &geom, &g).unwrap(), intensity, &g).unwrap();
        let p_in = absorbed_power(sigma, intensity).unwrap();
        prop_assert!(rel(conduction_power(&geom, &g, t).unwrap(), p_in) < 1e-10);
    }

    #[test]
    fn sigma_beta_round_trip(g in gas(), r in 20e-9..300e-9f64, log_sigma in -22.0..-14.0f64) {
        let sigma = 10f64.powf(log_sigma);
        let geom = ParticleGeometry::diamond(r).unwrap();
        let beta = beta_from_sigma(sigma, &geom, &g).unwrap();
        prop_assert!(rel(sigma_from_beta_radius(beta, r, &g).unwrap(), sigma) < 1e-12);
    }

    #[test]
    fn damping_radius_round_trip(g in gas(), r in 5e-9..2e-6f64, rho in 500.0..20000.0f64) {
        let gamma = damping_rate(r, &g, rho).unwrap();
        prop_assert!(rel(radius_from_damping(gamma, &g, rho).unwrap(), r) < 1e-12);
    }

    #[test]
    fn rayleigh_inversion_round_trip(eps_r in 1.5..12.0f64, log_eps_i in -7.0..-0.5f64, r in 10e-9..150e-9f64) {
        let eps_i = 10f64.powf(log_eps_i);
        let geom = ParticleGeometry::diamond(r).unwrap();
        let eps = DielectricConstant::new(eps_r, eps_i).unwrap();
        let sigma = rayleigh_sigma(&geom, &eps, 1550e-9).unwrap().sigma_abs;
        let back = epsilon_imag_from_sigma_ratio(sigma / geom.volume(), eps_r, 1550e-9).unwrap();
        prop_assert!(rel(back, eps_i) < 1e-10);
    }

    #[test]
    fn small_loss_limit(eps_r in 1.5..12.0f64, log_eps_i in -8.0..-2.0f64) {
        let eps_i = 10f64.powf(log_eps_i);
        let lambda = 1550e-9;
        let exact = bulk_absorption_coefficient(&DielectricConstant::new(eps_r, eps_i).unwrap(), lambda).unwrap();
        let approx = 2.0 * PI * eps_i / (eps_r.sqrt() * lambda);
        prop_assert!(rel(exact, approx) < 1e-3);
    }

    #[test]
    fn operations_are_pure(g in gas(), r in 20e-9..300e-9f64, t in 150.0..1000.0f64) {
        let geom = ParticleGeometry::diamond(r).unwrap();
        let poly = ZfsPolynomial::default();
        prop_assert_eq!(
            conduction_power(&geom, &g, t).unwrap().to_bits(),
            conduction_power(&geom, &g, t).unwrap().to_bits()
        );
        let d = eval_zfs(&poly, t).unwrap();
        prop_assert_eq!(invert_zfs(&poly, d).unwrap().to_bits(), invert_zfs(&poly, d).unwrap().to_bits());
    }
}

/// Independent check of the cubic against the same coefficients evaluated
/// term by term in the naive order.
#[test]
fn cubic_matches_naive_sum() {
    let poly = ZfsPolynomial::default();
    for t in [150.0, 294.0, 300.0, 512.5, 650.0, 1000.0] {
        let naive = 2.8697e9 + 9.7e4 * t + -3.7e2 * t * t + 0.17 * t * t * t;
        assert!(rel(eval_zfs(&poly, t).unwrap(), naive) < 1e-15);
    }
}
