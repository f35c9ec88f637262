//! Normal CDF, sigma solver and threshold checked against a slow, independent
//! erf implementation written here.

use partsel::calibration::{
    gaussian_mechanism_delta, per_draw_tail, std_normal_cdf, std_normal_inv_cdf, std_normal_upper_quantile,
};
use partsel::{calibrate, compute_rho, solve_sigma, PrivacyBudget, SensitivityProfile};
use proptest::prelude::*;

/// erf by its Maclaurin series; accurate for |z| <= 3.
fn erf_series(z: f64) -> f64 {
    let mut term = z;
    let mut sum = z;
    for n in 1..200 {
        term *= -z * z / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// erfc by its continued fraction, evaluated bottom-up; used for z > 2.
fn erfc_cf(z: f64) -> f64 {
    let mut f = z;
    for k in (1..300).rev() {
        f = z + (k as f64 / 2.0) / f;
    }
    (-z * z).exp() / (std::f64::consts::PI.sqrt() * f)
}

fn oracle_upper_tail(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    if z > 2.0 {
        0.5 * erfc_cf(z)
    } else if z < -2.0 {
        1.0 - 0.5 * erfc_cf(-z)
    } else {
        0.5 * (1.0 - erf_series(z))
    }
}

fn oracle_cdf(x: f64) -> f64 {
    1.0 - oracle_upper_tail(x)
}

/// Upper quantile by bisection on the oracle tail.
fn oracle_upper_quantile(q: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if oracle_upper_tail(mid) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn oracle_is_self_consistent() {
    // Series and continued fraction agree where both converge.
    for z in [2.0, 2.5, 3.0] {
        let a = 1.0 - erf_series(z);
        let b = erfc_cf(z);
        assert!((a - b).abs() < 1e-13, "z={z}: {a} vs {b}");
    }
}

#[test]
fn cdf_at_1_96() {
    let v = std_normal_cdf(1.959964);
    assert!((v - 0.975).abs() < 1e-6, "{v}");
    assert!((v - oracle_cdf(1.959964)).abs() < 1e-14);
}

#[test]
fn cdf_matches_oracle_on_grid() {
    for k in -80..=80 {
        let x = k as f64 / 10.0;
        let ours = std_normal_cdf(x);
        let oracle = oracle_cdf(x);
        assert!((ours - oracle).abs() <= 1e-14, "x={x}: {ours} vs {oracle}");
        if x > 2.0 {
            let tail = oracle_upper_tail(x);
            let rel = (std_normal_cdf(-x) - tail).abs() / tail;
            assert!(rel < 1e-12, "tail at {x}: rel error {rel}");
        }
    }
    assert_eq!(std_normal_cdf(0.0), 0.5);
    // 1 - 1e-20 rounds to 1 in f64; the bound is checked on the mirrored tail.
    assert!(std_normal_cdf(10.0) <= 1.0);
    let tail = std_normal_cdf(-10.0);
    assert!(tail > 0.0 && tail < 1e-20, "{tail}");
}

#[test]
fn inverse_at_0_999995() {
    let ours = std_normal_inv_cdf(0.999995).unwrap();
    let oracle = oracle_upper_quantile(5e-6);
    assert!((ours - 4.417173).abs() < 1e-4, "{ours}");
    assert!((ours - oracle).abs() < 1e-9, "{ours} vs {oracle}");
}

#[test]
fn inverse_symmetry_and_domain() {
    assert_eq!(std_normal_inv_cdf(0.5).unwrap(), 0.0);
    let a = std_normal_inv_cdf(0.123).unwrap();
    let b = std_normal_inv_cdf(0.877).unwrap();
    assert!((a + b).abs() < 1e-12);
    for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(std_normal_inv_cdf(p).is_err(), "{p}");
    }
}

#[test]
fn upper_quantile_deep_tail_matches_oracle() {
    for q in [1e-3, 1e-6, 5e-8, 1e-10, 1e-14] {
        let ours = std_normal_upper_quantile(q).unwrap();
        let oracle = oracle_upper_quantile(q);
        assert!((ours - oracle).abs() < 1e-8, "q={q}: {ours} vs {oracle}");
    }
}

/// The Gaussian-mechanism condition evaluated with the oracle CDF.
fn oracle_condition(eps: f64, sigma: f64) -> f64 {
    let a = 1.0 / (2.0 * sigma);
    let b = eps * sigma;
    oracle_cdf(a - b) - eps.exp() * oracle_cdf(-a - b)
}

/// Condition in tail form, stable for tiny deltas.
fn oracle_condition_tail(eps: f64, sigma: f64) -> f64 {
    let a = 1.0 / (2.0 * sigma);
    let b = eps * sigma;
    oracle_upper_tail(b - a) - eps.exp() * oracle_upper_tail(a + b)
}

fn oracle_sigma(eps: f64, delta: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6, 1e6);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if oracle_condition_tail(eps, mid) <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[test]
fn sigma_at_half_of_1e5_matches_oracle() {
    let budget = PrivacyBudget::new(1.0, 5e-6).unwrap();
    let sigma = solve_sigma(budget, 1.0).unwrap();
    let oracle = oracle_sigma(1.0, 5e-6);
    assert!((sigma / oracle - 1.0).abs() < 1e-9, "{sigma} vs {oracle}");
    assert!((sigma - 3.884140804623958).abs() < 1e-9);
}

#[test]
fn sigma_is_minimal() {
    for (eps, delta) in [(1.0, 5e-6), (0.5, 1e-6), (2.0, 1e-8), (0.1, 1e-3)] {
        let budget = PrivacyBudget::new(eps, delta).unwrap();
        let sigma = solve_sigma(budget, 1.0).unwrap();
        assert!(gaussian_mechanism_delta(eps, sigma, 1.0) <= delta);
        assert!(
            gaussian_mechanism_delta(eps, sigma * (1.0 - 1e-6), 1.0) > delta,
            "({eps}, {delta})"
        );
        if delta >= 1e-3 {
            assert!((oracle_condition(eps, sigma) - delta).abs() < 1e-9);
        }
    }
}

#[test]
fn sigma_trivial_and_monotone_cases() {
    let loose = PrivacyBudget::new(1.0, 1.0).unwrap();
    assert!(gaussian_mechanism_delta(1.0, 1e-3, 1.0) <= 1.0);
    assert!(solve_sigma(loose, 1.0).unwrap() <= 1e-3);
    let s1 = solve_sigma(PrivacyBudget::new(1.0, 5e-6).unwrap(), 1.0).unwrap();
    let s2 = solve_sigma(PrivacyBudget::new(2.0, 5e-6).unwrap(), 1.0).unwrap();
    assert!(s2 < s1);
    assert!(solve_sigma(
        PrivacyBudget {
            epsilon: f64::NAN,
            delta: 1e-5
        },
        1.0
    )
    .is_err());
    assert!(solve_sigma(loose, f64::INFINITY).is_err());
}

#[test]
fn rho_single_term_example() {
    let r = compute_rho(1.0, 1e-5, 1, &SensitivityProfile::inv_sqrt(1.0)).unwrap();
    let expected = 1.0 + oracle_upper_quantile(5e-6);
    assert!((r.rho - 5.417173).abs() < 1e-4, "{}", r.rho);
    assert!((r.rho - expected).abs() < 1e-9);
    assert_eq!(r.argmax_t, 1);

    let zero = compute_rho(2.5, 1e-5, 1, &SensitivityProfile::Constant(0.0)).unwrap();
    assert!((zero.rho - 2.5 * std_normal_upper_quantile(5e-6).unwrap()).abs() < 1e-12);
}

#[test]
fn rho_is_exhaustive_max() {
    let sigma = 3.884140804623958;
    for profile in [SensitivityProfile::inv_sqrt(1.0), SensitivityProfile::inv_sqrt(2.0)] {
        let r = compute_rho(sigma, 1e-5, 100, &profile).unwrap();
        let mut best = (f64::NEG_INFINITY, 0);
        for t in 1..=100 {
            let v = profile.eval(t) + sigma * oracle_upper_quantile(per_draw_tail(1e-5, t));
            if v > best.0 {
                best = (v, t);
            }
        }
        assert!((r.rho - best.0).abs() < 1e-8, "{} vs {}", r.rho, best.0);
        assert_eq!(r.argmax_t, best.1);
    }
}

#[test]
fn calibrate_reference_values() {
    let c = calibrate(
        PrivacyBudget::new(1.0, 1e-5).unwrap(),
        100,
        2.0,
        SensitivityProfile::inv_sqrt(1.0),
    )
    .unwrap();
    assert!((c.sigma - 3.884140804623958).abs() < 1e-9);
    assert!((c.rho - 20.78974385520444).abs() < 1e-8);
    assert!((c.tau - 28.558025464452356).abs() < 1e-8);
    assert_eq!(c.rho_argmax_t, 100);
}

proptest! {
    #[test]
    fn cdf_inverse_round_trip(p in 1e-15f64..(1.0 - 1e-15)) {
        let x = std_normal_inv_cdf(p).unwrap();
        prop_assert!((std_normal_cdf(x) - p).abs() <= 1e-12);
    }

    #[test]
    fn inverse_is_increasing(p in 1e-12f64..0.999, step in 1e-9f64..1e-3) {
        let q = (p + step).min(1.0 - 1e-12);
        prop_assert!(std_normal_inv_cdf(q).unwrap() > std_normal_inv_cdf(p).unwrap());
    }

    #[test]
    fn rho_monotone_in_sigma_and_delta(
        sigma in 0.1f64..10.0,
        scale in 1.0f64..1.5,
        delta in 1e-9f64..0.1,
        shrink in 0.01f64..0.99,
        delta0 in 1usize..60,
    ) {
        let h = SensitivityProfile::inv_sqrt(1.0);
        let base = compute_rho(sigma, delta, delta0, &h).unwrap().rho;
        prop_assert!(compute_rho(sigma * scale, delta, delta0, &h).unwrap().rho >= base);
        prop_assert!(compute_rho(sigma, delta * shrink, delta0, &h).unwrap().rho >= base);
    }

    #[test]
    fn solved_sigma_is_tight(eps in 0.05f64..4.0, log_delta in -12.0f64..-2.0) {
        let delta = 10f64.powf(log_delta);
        let sigma = solve_sigma(PrivacyBudget::new(eps, delta).unwrap(), 1.0).unwrap();
        prop_assert!(gaussian_mechanism_delta(eps, sigma, 1.0) <= delta);
        prop_assert!(gaussian_mechanism_delta(eps, sigma * (1.0 - 1e-6), 1.0) > delta);
    }
}
