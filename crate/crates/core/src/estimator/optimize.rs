//! Quasi-Newton minimization with finite-difference gradients, and a
//! central-difference Hessian for the covariance step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Outer-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Maximum number of objective evaluations, gradients included.
    pub max_evaluations: usize,
    /// Converged when the relative objective change over a step is below this...
    pub rel_tol: f64,
    /// ...and the gradient norm is below this.
    pub grad_tol: f64,
    /// Relative central-difference step for gradients.
    pub gradient_step: f64,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_evaluations: 20_000,
            rel_tol: 1e-6,
            grad_tol: 1e-3,
            gradient_step: 1e-4,
            max_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> Option<f64>> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        match (self.f)(x) {
            Some(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    }

    fn gradient(&mut self, x: &[f64], fx: f64, rel_step: f64) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        let mut work = x.to_vec();
        for i in 0..x.len() {
            let h = rel_step * x[i].abs().max(1.0);
            work[i] = x[i] + h;
            let up = self.eval(&work);
            work[i] = x[i] - h;
            let down = self.eval(&work);
            work[i] = x[i];
            g[i] = match (up.is_finite(), down.is_finite()) {
                (true, true) => (up - down) / (2.0 * h),
                (true, false) => (up - fx) / h,
                (false, true) => (fx - down) / h,
                (false, false) => 0.0,
            };
        }
        g
    }
}

/// BFGS on the inverse Hessian with Armijo backtracking. Failed evaluations
/// (`None` or non-finite) count as rejected trial points.
pub fn minimize_bfgs(
    f: impl FnMut(&[f64]) -> Option<f64>,
    x0: &[f64],
    settings: &OptimizerSettings,
) -> Option<OptimizeResult> {
    let n = x0.len();
    let mut obj = Counted { f, evaluations: 0 };
    let mut x = DVector::from_column_slice(x0);
    let mut fx = obj.eval(x.as_slice());
    if !fx.is_finite() {
        return None;
    }
    if n == 0 {
        return Some(OptimizeResult {
            x: vec![],
            value: fx,
            grad_norm: 0.0,
            converged: true,
            iterations: 0,
            evaluations: obj.evaluations,
        });
    }
    let mut g = obj.gradient(x.as_slice(), fx, settings.gradient_step);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut converged = g.norm() < settings.grad_tol;
    let mut iterations = 0;

    while !converged && obj.evaluations < settings.max_evaluations {
        iterations += 1;
        let mut dir = -(&h_inv * &g);
        if g.dot(&dir) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            dir = -g.clone();
        }
        let biggest = dir.amax();
        if biggest > settings.max_step {
            dir *= settings.max_step / biggest;
        }
        let slope = g.dot(&dir);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &dir * alpha;
            let ft = obj.eval(trial.as_slice());
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if fresh {
                break;
            }
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let g_new = obj.gradient(x_new.as_slice(), f_new, settings.gradient_step);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - (&s * y.transpose()) * rho;
            let right = &eye - (&y * s.transpose()) * rho;
            h_inv = &left * &h_inv * &right + (&s * s.transpose()) * rho;
            fresh = false;
        }

        let rel_change = (fx - f_new).abs() / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        converged = rel_change < settings.rel_tol && g.norm() < settings.grad_tol;
    }

    Some(OptimizeResult {
        x: x.as_slice().to_vec(),
        value: fx,
        grad_norm: g.norm(),
        converged,
        iterations,
        evaluations: obj.evaluations,
    })
}

/// Central-difference Hessian with step `step · max(1, |x_i|)`. Returns
/// `None` when any evaluation fails.
pub fn numerical_hessian(mut f: impl FnMut(&[f64]) -> Option<f64>, x: &[f64], step: f64) -> Option<DMatrix<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| step * v.abs().max(1.0)).collect();
    let mut eval = |dx: &[(usize, f64)]| -> Option<f64> {
        let mut p = x.to_vec();
        for &(i, d) in dx {
            p[i] += d;
        }
        f(&p).filter(|v| v.is_finite())
    };
    let f0 = eval(&[])?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let up = eval(&[(i, h[i])])?;
        let down = eval(&[(i, -h[i])])?;
        hess[(i, i)] = (up - 2.0 * f0 + down) / (h[i] * h[i]);
        for j in 0..i {
            let pp = eval(&[(i, h[i]), (j, h[j])])?;
            let pm = eval(&[(i, h[i]), (j, -h[j])])?;
            let mp = eval(&[(i, -h[i]), (j, h[j])])?;
            let mm = eval(&[(i, -h[i]), (j, -h[j])])?;
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Some(hess)
}
