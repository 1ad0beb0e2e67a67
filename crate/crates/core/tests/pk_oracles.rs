//! Closed-form concentration and exposure checks against independent
//! numerical oracles: an RK4 integration of the depot/central system,
//! adaptive Simpson quadrature for AUC, and a brute-force peak search.

use poppk_core::model::{
    concentration, error_sd, exposure_metrics, tmax_first_order, unbound_cmax, IndividualParams, SigmaParams,
};
use proptest::prelude::*;

/// Integrate dA_depot/dt = −ka·A_depot, dA_c/dt = ka·A_depot − ke·A_c
/// with fixed-step RK4 and return A_c(t)/V.
fn rk4_concentration(t: f64, dose: f64, f: f64, ka: f64, ke: f64, v: f64) -> f64 {
    let steps = 20_000usize;
    let h = t / steps as f64;
    let deriv = |s: [f64; 2]| [-ka * s[0], ka * s[0] - ke * s[1]];
    let mut s = [f * dose, 0.0];
    for _ in 0..steps {
        let k1 = deriv(s);
        let k2 = deriv([s[0] + 0.5 * h * k1[0], s[1] + 0.5 * h * k1[1]]);
        let k3 = deriv([s[0] + 0.5 * h * k2[0], s[1] + 0.5 * h * k2[1]]);
        let k4 = deriv([s[0] + h * k3[0], s[1] + h * k3[1]]);
        for i in 0..2 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    s[1] / v
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    step(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
}

fn typical() -> IndividualParams {
    IndividualParams::one_compartment(0.15, 14.0, 0.18, 1.0)
}

#[test]
fn typical_profile_matches_ode_integration() {
    let p = typical();
    for t in [1.0, 5.0, 16.7, 30.0, 75.0, 240.0] {
        let closed = concentration(t, 6.0, &p);
        let ode = rk4_concentration(t, 6.0, 1.0, p.ka, p.ke, p.v);
        assert!((closed - ode).abs() <= 1e-9 * ode.max(1e-12), "t={t}: {closed} vs {ode}");
    }
    let c = concentration(16.7, 6.0, &p);
    assert!((c - 0.358).abs() < 5e-4, "C(16.7) = {c}");
}

#[test]
fn degenerate_rates_limit() {
    let p = IndividualParams::one_compartment(0.14, 14.0, 0.01, 1.0);
    let expected = 6.0 * 0.01 * 100.0 * (-1.0f64).exp() / 14.0;
    let c = concentration(100.0, 6.0, &p);
    assert!((c - expected).abs() < 1e-12);
    assert!((c - 0.1577).abs() < 1e-4);
    for factor in [1.0 + 1e-6, 1.0 - 1e-6] {
        let near = IndividualParams::one_compartment(0.14, 14.0, 0.01 * factor, 1.0);
        let cn = concentration(100.0, 6.0, &near);
        assert!(((cn - c) / c).abs() < 1e-6, "{cn} vs {c}");
    }
    let ode = rk4_concentration(100.0, 6.0, 1.0, 0.01, 0.01, 14.0);
    assert!((c - ode).abs() < 1e-9);
}

#[test]
fn typical_exposures_against_oracles() {
    let p = typical();
    let m = exposure_metrics(&p, 6.0, 0.01).unwrap();
    assert_eq!(m.auc, 6.0 / 0.15);

    let c = |t: f64| concentration(t, 6.0, &p);
    let auc_to_t = adaptive_simpson(&c, 0.0, 2000.0, 1e-10);
    let tail = c(2000.0) / p.ke;
    assert!((auc_to_t + tail - 40.0).abs() < 1e-6, "quadrature AUC {}", auc_to_t + tail);

    // Brute-force peak on a fine grid, then a local refinement.
    let (mut best_t, mut best_c) = (0.0, 0.0);
    for i in 1..=100_000 {
        let t = i as f64 * 1e-3;
        if c(t) > best_c {
            best_t = t;
            best_c = c(t);
        }
    }
    assert!((m.tmax - best_t).abs() < 2e-3, "{} vs {best_t}", m.tmax);
    assert!((m.cmax - best_c).abs() < 1e-9);
    assert!((m.tmax - 16.7).abs() < 0.05);
    assert!((m.cmax - 0.358).abs() < 5e-4);
}

#[test]
fn unbound_and_residual_arithmetic() {
    assert!((unbound_cmax(0.315, 0.01) - 3.15).abs() < 1e-12);
    assert!((error_sd(0.3, &SigmaParams::proportional(0.14)) - 0.042).abs() < 1e-15);
    assert_eq!(error_sd(0.0, &SigmaParams::proportional(0.14)), 1e-10);
    assert!((error_sd(0.4, &SigmaParams::combined(0.03, 0.1)) - 0.05).abs() < 1e-15);
}

proptest! {
    #[test]
    fn closed_form_agrees_with_ode(
        cl in 0.02f64..1.0,
        v in 2.0f64..50.0,
        ka in 0.005f64..1.0,
        f in 0.3f64..1.0,
        t in 0.5f64..200.0,
    ) {
        let p = IndividualParams::one_compartment(cl, v, ka, f);
        let closed = concentration(t, 6.0, &p);
        let ode = rk4_concentration(t, 6.0, f, ka, p.ke, v);
        prop_assert!((closed - ode).abs() <= 1e-7 * ode.abs() + 1e-13, "{} vs {}", closed, ode);
    }

    #[test]
    fn profile_is_nonnegative_and_dose_linear(
        cl in 0.02f64..1.0,
        v in 2.0f64..50.0,
        ka in 0.005f64..1.0,
        t in -10.0f64..500.0,
        dose in 0.1f64..20.0,
    ) {
        let p = IndividualParams::one_compartment(cl, v, ka, 1.0);
        let c1 = concentration(t, dose, &p);
        let c2 = concentration(t, 2.0 * dose, &p);
        prop_assert!(c1 >= 0.0);
        prop_assert!((c2 - 2.0 * c1).abs() <= 1e-12 * c2.abs().max(1e-300));
    }

    #[test]
    fn tmax_is_the_peak(ka in 0.01f64..1.0, ke in 0.001f64..0.5) {
        let t = tmax_first_order(ka, ke);
        let p = IndividualParams { ke, ..IndividualParams::one_compartment(ke * 10.0, 10.0, ka, 1.0) };
        let c = |s: f64| concentration(s, 1.0, &p);
        prop_assert!(c(t) >= c(t * 0.999) && c(t) >= c(t * 1.001));
    }

    #[test]
    fn auc_is_dose_over_clearance(cl in 0.02f64..1.0, v in 2.0f64..50.0, ka in 0.01f64..1.0, f in 0.3f64..1.0) {
        let p = IndividualParams::one_compartment(cl, v, ka, f);
        let m = exposure_metrics(&p, 6.0, 0.01).unwrap();
        prop_assert!((m.auc - f * 6.0 / cl).abs() < 1e-12 * m.auc);
        prop_assert!((m.cu_max - m.cmax * 10.0).abs() < 1e-12 * m.cu_max.max(1e-300));
    }
}
