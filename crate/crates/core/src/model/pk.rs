//! Closed-form concentration profiles, residual error and exposure metrics.

use serde::{Deserialize, Serialize};

use super::params::{IndividualParams, SigmaParams};
use crate::error::{Error, Result};

/// Below this relative gap between `ka` and `ke` the one-compartment profile
/// switches to its analytic `ka = ke` limit.
pub const DEGENERATE_RATE_GAP: f64 = 1e-8;

/// Lower bound on the residual SD, mg/L.
pub const RESIDUAL_SD_FLOOR: f64 = 1e-10;

/// Default unbound fraction.
pub const DEFAULT_UNBOUND_FRACTION: f64 = 0.01;

/// Plasma concentration (mg/L) `t` minutes after a single dose of `dose` mg
/// into the depot. Negative times give zero.
pub fn concentration(t: f64, dose: f64, p: &IndividualParams) -> f64 {
    if t <= 0.0 || dose == 0.0 {
        return 0.0;
    }
    match (p.zero_order_duration, p.peripheral) {
        (Some(d1), _) => one_compartment_zero_order(t, dose, p.f, p.cl, p.v, d1),
        (None, Some(per)) => {
            two_compartment_first_order(t, dose, p.f, p.cl, p.v, p.ka, per.q, per.v2)
        }
        (None, None) => one_compartment_first_order(t, dose, p.f, p.v, p.ka, p.ke),
    }
}

/// `C(t) = F·D·ka / (V·(ka − ke)) · (e^{−ke·t} − e^{−ka·t})`, written as
/// `F·D·ka/V · e^{−ke·t} · (1 − e^{−(ka−ke)t})/(ka − ke)` to avoid cancellation.
fn one_compartment_first_order(t: f64, dose: f64, f: f64, v: f64, ka: f64, ke: f64) -> f64 {
    let gap = ka - ke;
    if (gap / ke).abs() < DEGENERATE_RATE_GAP {
        return f * dose * ke * t / v * (-ke * t).exp();
    }
    let ratio = -(-gap * t).exp_m1() / gap;
    f * dose * ka / v * (-ke * t).exp() * ratio
}

fn one_compartment_zero_order(t: f64, dose: f64, f: f64, cl: f64, v: f64, d1: f64) -> f64 {
    let ke = cl / v;
    let rate = f * dose / d1;
    let plateau = |tau: f64| -rate / cl * (-ke * tau).exp_m1();
    if t <= d1 {
        plateau(t)
    } else {
        plateau(d1) * (-ke * (t - d1)).exp()
    }
}

#[allow(clippy::too_many_arguments)]
fn two_compartment_first_order(
    t: f64,
    dose: f64,
    f: f64,
    cl: f64,
    v: f64,
    ka: f64,
    q: f64,
    v2: f64,
) -> f64 {
    let k10 = cl / v;
    let k12 = q / v;
    let k21 = q / v2;
    let sum = k10 + k12 + k21;
    let disc = (sum * sum - 4.0 * k10 * k21).max(0.0).sqrt();
    let alpha = 0.5 * (sum + disc);
    let beta = 0.5 * (sum - disc);
    // The three-exponential form is singular when ka hits a disposition rate;
    // nudge ka off the singularity.
    let mut ka = ka;
    for rate in [alpha, beta] {
        if ((ka - rate) / rate).abs() < 1e-6 {
            ka = rate * (1.0 + 1e-6);
        }
    }
    let beta = if ((alpha - beta) / alpha).abs() < 1e-9 { alpha * (1.0 - 1e-9) } else { beta };
    let a = (k21 - alpha) / ((ka - alpha) * (beta - alpha));
    let b = (k21 - beta) / ((ka - beta) * (alpha - beta));
    let c = (k21 - ka) / ((alpha - ka) * (beta - ka));
    f * dose * ka / v * (a * (-alpha * t).exp() + b * (-beta * t).exp() + c * (-ka * t).exp())
}

/// Residual standard deviation at prediction `pred`, floored at
/// [`RESIDUAL_SD_FLOOR`].
pub fn error_sd(pred: f64, sigma: &SigmaParams) -> f64 {
    let prop = pred * sigma.sigma_prop;
    let sd = match sigma.model {
        super::ErrorModel::Additive => sigma.sigma_add,
        super::ErrorModel::Proportional => prop.abs(),
        super::ErrorModel::Combined => sigma.sigma_add.hypot(prop),
    };
    sd.max(RESIDUAL_SD_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureMetrics {
    /// AUC from zero to infinity, mg·min/L.
    pub auc: f64,
    /// Peak concentration, mg/L.
    pub cmax: f64,
    /// Time of peak, min.
    pub tmax: f64,
    /// Unbound peak concentration, µg/L.
    pub cu_max: f64,
}

/// Unbound peak in µg/L from a total peak in mg/L.
pub fn unbound_cmax(cmax: f64, fu: f64) -> f64 {
    cmax * fu * 1000.0
}

/// Time of peak for one-compartment first-order absorption:
/// `ln(ka/ke)/(ka − ke)`, with the limit `1/ke` when the rates coincide.
pub fn tmax_first_order(ka: f64, ke: f64) -> f64 {
    let gap = ka - ke;
    if (gap / ke).abs() < DEGENERATE_RATE_GAP {
        1.0 / ke
    } else {
        (gap / ke).ln_1p() / gap
    }
}

/// Single-dose exposures for individual parameters.
pub fn exposure_metrics(p: &IndividualParams, dose: f64, fu: f64) -> Result<ExposureMetrics> {
    p.validate()?;
    if !(dose > 0.0) {
        return Err(Error::Domain(format!("dose must be positive, got {dose}")));
    }
    if !(fu > 0.0 && fu <= 1.0) {
        return Err(Error::Domain(format!("unbound fraction must be in (0, 1], got {fu}")));
    }
    let auc = p.f * dose / p.cl;
    let tmax = match (p.zero_order_duration, p.peripheral) {
        (Some(d1), _) => d1,
        (None, None) => tmax_first_order(p.ka, p.ke),
        (None, Some(_)) => numeric_tmax(|t| concentration(t, dose, p), 1.0 / p.ka.min(p.ke)),
    };
    let cmax = concentration(tmax, dose, p);
    Ok(ExposureMetrics { auc, cmax, tmax, cu_max: unbound_cmax(cmax, fu) })
}

/// Locate the peak of a unimodal profile: coarse log-spaced scan, then
/// golden-section refinement.
fn numeric_tmax(conc: impl Fn(f64) -> f64, scale: f64) -> f64 {
    let n = 400;
    let lo = scale * 1e-4;
    let hi = scale * 50.0;
    let grid: Vec<f64> =
        (0..=n).map(|i| lo * (hi / lo).powf(i as f64 / n as f64)).collect();
    let best = (0..=n)
        .max_by(|&a, &b| conc(grid[a]).total_cmp(&conc(grid[b])))
        .unwrap_or(0);
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(n)];
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if conc(c) > conc(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
        if (b - a).abs() < 1e-12 * b {
            break;
        }
    }
    0.5 * (a + b)
}
