//! Per-subject FOCE-I quantities: the conditional (inner) objective, the
//! empirical Bayes estimate of the random effects, and the linearized
//! marginal contribution to the objective function.
//!
//! Everything here is generic over [`IndividualModel`], so the same code path
//! serves the pharmacokinetic model and the small analytic test families.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{error_sd, ErrorModel, SigmaParams, RESIDUAL_SD_FLOOR};

/// Relative finite-difference step for derivatives with respect to eta.
pub const ETA_FD_STEP: f64 = 1e-5;
/// Convergence tolerance on the gradient norm of the conditional objective.
pub const EBE_TOL: f64 = 1e-8;
/// Convergence tolerance on the Newton step. Much tighter than the
/// gradient tolerance: the objective function value depends on η̂ to first
/// order, and the outer finite-difference gradient amplifies any error in η̂.
pub const EBE_STEP_TOL: f64 = 1e-11;
/// Steps below this length skip the line search.
const EBE_SMALL_STEP: f64 = 1e-5;
const EBE_MAX_ITER: usize = 200;

/// A subject's predictions as a function of its random effects.
pub trait IndividualModel {
    /// Observed values that enter the likelihood.
    fn observations(&self) -> &[f64];

    /// Number of active random effects.
    fn n_eta(&self) -> usize;

    /// Write predictions at `eta` into `out` (same length as the observations).
    fn predict(&self, eta: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Residual variance `u = g²` at prediction `f` with its first and second
/// derivatives in `f`. At the SD floor the variance is treated as constant.
fn variance_derivatives(f: f64, sigma: &SigmaParams) -> (f64, f64, f64) {
    let g = error_sd(f, sigma);
    let u = g * g;
    if g <= RESIDUAL_SD_FLOOR || sigma.model == ErrorModel::Additive {
        return (u, 0.0, 0.0);
    }
    let b2 = sigma.sigma_prop * sigma.sigma_prop;
    (u, 2.0 * b2 * f, 2.0 * b2)
}

/// First and second derivatives in `f` of `(y − f)²/u(f) + ln u(f)`.
fn data_derivatives(y: f64, f: f64, sigma: &SigmaParams) -> (f64, f64) {
    let (u, du, d2u) = variance_derivatives(f, sigma);
    let r = y - f;
    let d1 = -2.0 * r / u - r * r * du / (u * u) + du / u;
    let d2 = 2.0 / u + 4.0 * r * du / (u * u) - r * r * d2u / (u * u) + 2.0 * r * r * du * du / (u * u * u)
        + d2u / u
        - du * du / (u * u);
    (d1, d2)
}

fn predictions<M: IndividualModel>(m: &M, eta: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m.observations().len()];
    m.predict(eta, &mut out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite prediction".into()));
    }
    Ok(out)
}

fn data_term(y: &[f64], pred: &[f64], sigma: &SigmaParams) -> f64 {
    y.iter()
        .zip(pred)
        .map(|(y, f)| {
            let g = error_sd(*f, sigma);
            let r = y - f;
            r * r / (g * g) + (g * g).ln()
        })
        .sum()
}

fn prior_term(omega: &[f64], eta: &[f64]) -> f64 {
    omega.iter().zip(eta).map(|(w, e)| e * e / w + w.ln()).sum()
}

fn check_omega(omega: &[f64], n_eta: usize) -> Result<()> {
    if omega.len() != n_eta {
        return Err(Error::Domain(format!("{} variances for {n_eta} random effects", omega.len())));
    }
    if omega.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Domain(format!("active omega variances must be positive: {omega:?}")));
    }
    Ok(())
}

/// Conditional objective for one subject:
/// `Σ_j [(y_j − f_j)²/g_j² + ln g_j²] + ηᵀΩ⁻¹η + ln|Ω|` with diagonal Ω.
pub fn inner_objective<M: IndividualModel>(
    m: &M,
    omega: &[f64],
    sigma: &SigmaParams,
    eta: &[f64],
) -> Result<f64> {
    check_omega(omega, m.n_eta())?;
    let prior = prior_term(omega, eta);
    if m.observations().is_empty() {
        return Ok(prior);
    }
    let pred = predictions(m, eta)?;
    let value = data_term(m.observations(), &pred, sigma) + prior;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Evaluation("non-finite conditional objective".into()))
    }
}

/// Central-difference Jacobian of the predictions with respect to eta,
/// step `ETA_FD_STEP · max(1, |η_k|)`.
pub fn eta_jacobian<M: IndividualModel>(m: &M, eta: &[f64]) -> Result<DMatrix<f64>> {
    let n = m.observations().len();
    let k = eta.len();
    let mut jac = DMatrix::zeros(n, k);
    let mut work = eta.to_vec();
    for c in 0..k {
        let h = ETA_FD_STEP * eta[c].abs().max(1.0);
        work[c] = eta[c] + h;
        let up = predictions(m, &work)?;
        work[c] = eta[c] - h;
        let down = predictions(m, &work)?;
        work[c] = eta[c];
        for r in 0..n {
            jac[(r, c)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Jacobian (as [`eta_jacobian`]) and per-observation Hessians of the
/// predictions with respect to eta, by finite differences. Hessians are
/// stored flat: entry `(r, a, b)` at `(r·k + a)·k + b`.
fn prediction_derivatives<M: IndividualModel>(
    m: &M,
    eta: &[f64],
    pred: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = pred.len();
    let k = eta.len();
    let h: Vec<f64> = eta.iter().map(|e| ETA_FD_STEP * e.abs().max(1.0)).collect();
    let mut jac = DMatrix::zeros(n, k);
    let mut hess = vec![0.0; n * k * k];
    let mut work = eta.to_vec();
    let mut ups = Vec::with_capacity(k);
    for a in 0..k {
        work[a] = eta[a] + h[a];
        let up = predictions(m, &work)?;
        work[a] = eta[a] - h[a];
        let down = predictions(m, &work)?;
        work[a] = eta[a];
        for r in 0..n {
            jac[(r, a)] = (up[r] - down[r]) / (2.0 * h[a]);
            hess[(r * k + a) * k + a] = (up[r] - 2.0 * pred[r] + down[r]) / (h[a] * h[a]);
        }
        ups.push(up);
    }
    // Mixed partials from one forward corner each. They only steer the
    // Newton direction (the optimum is fixed by the central-difference
    // gradient), so first-order accuracy is enough.
    for a in 0..k {
        for b in 0..a {
            work[a] = eta[a] + h[a];
            work[b] = eta[b] + h[b];
            let corner = predictions(m, &work)?;
            work[a] = eta[a];
            work[b] = eta[b];
            for r in 0..n {
                let v = (corner[r] - ups[a][r] - ups[b][r] + pred[r]) / (h[a] * h[b]);
                hess[(r * k + a) * k + b] = v;
                hess[(r * k + b) * k + a] = v;
            }
        }
    }
    Ok((jac, hess))
}

/// Posterior mode of the random effects for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EbeEstimate {
    pub eta: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimize the conditional objective over eta by Newton steps (Fisher
/// scoring where the Hessian is indefinite) with a backtracking line search,
/// from eta = 0 and from one deterministic perturbed start (±ω/2,
/// alternating sign). The lower optimum wins; ties keep the eta = 0 start.
pub fn estimate_ebe<M: IndividualModel>(m: &M, omega: &[f64], sigma: &SigmaParams) -> Result<EbeEstimate> {
    let k = m.n_eta();
    check_omega(omega, k)?;
    if m.observations().is_empty() || k == 0 {
        let eta = vec![0.0; k];
        let objective = inner_objective(m, omega, sigma, &eta)?;
        return Ok(EbeEstimate { eta, objective, converged: true, iterations: 0 });
    }
    let zero = vec![0.0; k];
    let perturbed: Vec<f64> = omega
        .iter()
        .enumerate()
        .map(|(i, w)| if i % 2 == 0 { 0.5 } else { -0.5 } * w.sqrt())
        .collect();

    let first = newton_search(m, omega, sigma, zero);
    let second = newton_search(m, omega, sigma, perturbed);
    match (first, second) {
        (Ok(a), Ok(b)) => Ok(if b.objective < a.objective { b } else { a }),
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), Ok(b)) => Ok(b),
        (Err(e), Err(_)) => Err(e),
    }
}

fn newton_search<M: IndividualModel>(
    m: &M,
    omega: &[f64],
    sigma: &SigmaParams,
    start: Vec<f64>,
) -> Result<EbeEstimate> {
    let y = m.observations();
    let k = start.len();
    let mut eta = start;
    let mut pred = predictions(m, &eta)?;
    let mut obj = data_term(y, &pred, sigma) + prior_term(omega, &eta);
    if !obj.is_finite() {
        return Err(Error::Evaluation("non-finite conditional objective at start".into()));
    }
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..EBE_MAX_ITER {
        iterations = it + 1;
        let (jac, hess_f) = prediction_derivatives(m, &eta, &pred)?;
        let mut grad = DVector::<f64>::zeros(k);
        let mut newton = DMatrix::<f64>::zeros(k, k);
        let mut info = DMatrix::<f64>::zeros(k, k);
        for (j, (&yj, &fj)) in y.iter().zip(&pred).enumerate() {
            let (d1, d2) = data_derivatives(yj, fj, sigma);
            let (u, du, _) = variance_derivatives(fj, sigma);
            // Expected information: 2/u + (u'/u)² per unit of J·Jᵀ.
            let w_info = 2.0 / u + du * du / (u * u);
            for a in 0..k {
                grad[a] += jac[(j, a)] * d1;
                for b in 0..k {
                    let outer = jac[(j, a)] * jac[(j, b)];
                    newton[(a, b)] += outer * d2 + hess_f[(j * k + a) * k + b] * d1;
                    info[(a, b)] += outer * w_info;
                }
            }
        }
        for i in 0..k {
            grad[i] += 2.0 * eta[i] / omega[i];
            newton[(i, i)] += 2.0 / omega[i];
            info[(i, i)] += 2.0 / omega[i];
        }
        if grad.norm() < EBE_TOL {
            converged = true;
            break;
        }
        // Newton where the exact Hessian is positive definite, Fisher
        // scoring otherwise.
        let chol = match Cholesky::new(newton) {
            Some(c) => c,
            None => Cholesky::new(info)
                .ok_or_else(|| Error::Evaluation("singular information matrix in EBE search".into()))?,
        };
        let step = chol.solve(&(-&grad));
        let slope = grad.dot(&step);

        let full = step.norm();
        if full < EBE_SMALL_STEP {
            // Too small for the objective to register a decrease reliably;
            // the iteration is locally contracting, so take the full step.
            let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, s)| e + s).collect();
            let Ok(p) = predictions(m, &trial) else { break };
            eta = trial;
            obj = data_term(y, &p, sigma) + prior_term(omega, &eta);
            pred = p;
            if full < EBE_STEP_TOL {
                converged = true;
                break;
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, s)| e + alpha * s).collect();
            if let Ok(p) = predictions(m, &trial) {
                let o = data_term(y, &p, sigma) + prior_term(omega, &trial);
                if o.is_finite() && o <= obj + 1e-4 * alpha * slope {
                    accepted = Some((trial, p, o));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, p, o)) => {
                eta = trial;
                pred = p;
                obj = o;
            }
            None => break,
        }
    }
    Ok(EbeEstimate { eta, objective: obj, converged, iterations })
}

/// First-order linearization of one subject's model about `eta`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub eta: Vec<f64>,
    /// Predictions at `eta`.
    pub pred: DVector<f64>,
    /// `∂f/∂η` at `eta`.
    pub jac: DMatrix<f64>,
    /// Residual SDs evaluated at `eta` (interaction).
    pub sd: DVector<f64>,
    /// `e = y − f(η̂) + G·η̂`.
    pub residual: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Linearization {
    /// `ln|V| + eᵀV⁻¹e` with `V = GΩGᵀ + diag(g²)`.
    pub fn ofv(&self) -> f64 {
        let l = self.chol.l_dirty();
        let log_det: f64 = (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let w = self.whitened();
        log_det + w.norm_squared()
    }

    /// `L⁻¹e` where `V = LLᵀ`; these are the conditional weighted residuals.
    pub fn whitened(&self) -> DVector<f64> {
        let l = self.chol.l();
        l.solve_lower_triangular(&self.residual)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }
}

pub fn linearize<M: IndividualModel>(
    m: &M,
    omega: &[f64],
    sigma: &SigmaParams,
    eta: &[f64],
) -> Result<Linearization> {
    check_omega(omega, m.n_eta())?;
    let y = DVector::from_column_slice(m.observations());
    let n = y.len();
    let pred = DVector::from_vec(predictions(m, eta)?);
    let jac = eta_jacobian(m, eta)?;
    let sd = pred.map(|f| error_sd(f, sigma));
    let eta_v = DVector::from_column_slice(eta);
    let residual = &y - &pred + &jac * &eta_v;
    let omega_m = DMatrix::from_diagonal(&DVector::from_column_slice(omega));
    let mut v = &jac * omega_m * jac.transpose();
    for i in 0..n {
        v[(i, i)] += sd[i] * sd[i];
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Evaluation("non-finite marginal covariance".into()));
    }
    let chol = Cholesky::new(v)
        .ok_or_else(|| Error::Evaluation("marginal covariance is not positive definite".into()))?;
    Ok(Linearization { eta: eta.to_vec(), pred, jac, sd, residual, chol })
}

/// One subject's contribution to the FOCE-I objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFoce {
    pub ofv: f64,
    pub ebe: EbeEstimate,
}

pub fn subject_ofv<M: IndividualModel>(m: &M, omega: &[f64], sigma: &SigmaParams) -> Result<SubjectFoce> {
    let ebe = estimate_ebe(m, omega, sigma)?;
    if m.observations().is_empty() {
        return Ok(SubjectFoce { ofv: 0.0, ebe });
    }
    let ofv = if m.n_eta() == 0 {
        let pred = predictions(m, &[])?;
        data_term(m.observations(), &pred, sigma)
    } else {
        linearize(m, omega, sigma, &ebe.eta)?.ofv()
    };
    if !ofv.is_finite() {
        return Err(Error::Evaluation("non-finite subject objective".into()));
    }
    Ok(SubjectFoce { ofv, ebe })
}

/// `y = θ + Σ η + ε`: a linear Gaussian family on which FOCE is exact.
#[derive(Debug, Clone)]
pub struct LinearGaussianSubject {
    pub y: Vec<f64>,
    pub mean: f64,
    pub n_eta: usize,
}

impl IndividualModel for LinearGaussianSubject {
    fn observations(&self) -> &[f64] {
        &self.y
    }

    fn n_eta(&self) -> usize {
        self.n_eta
    }

    fn predict(&self, eta: &[f64], out: &mut [f64]) -> Result<()> {
        let shift: f64 = eta.iter().sum();
        out.iter_mut().for_each(|o| *o = self.mean + shift);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(y: f64) -> LinearGaussianSubject {
        LinearGaussianSubject { y: vec![y], mean: 0.0, n_eta: 1 }
    }

    #[test]
    fn inner_objective_by_substitution() {
        let s = SigmaParams::additive(1.0);
        assert_eq!(inner_objective(&single(2.0), &[1.0], &s, &[0.0]).unwrap(), 4.0);
        assert_eq!(inner_objective(&single(2.0), &[1.0], &s, &[1.0]).unwrap(), 2.0);
    }

    #[test]
    fn no_data_keeps_prior_only() {
        let m = LinearGaussianSubject { y: vec![], mean: 0.0, n_eta: 1 };
        let s = SigmaParams::additive(1.0);
        let v = inner_objective(&m, &[2.0], &s, &[1.0]).unwrap();
        assert!((v - (0.5 + 2f64.ln())).abs() < 1e-15);
        let ebe = estimate_ebe(&m, &[2.0], &s).unwrap();
        assert_eq!(ebe.eta, vec![0.0]);
        assert_eq!(subject_ofv(&m, &[2.0], &s).unwrap().ofv, 0.0);
    }

    #[test]
    fn conjugate_posterior_mode() {
        let s = SigmaParams::additive(1.0);
        let ebe = estimate_ebe(&single(2.0), &[1.0], &s).unwrap();
        assert!(ebe.converged);
        assert!((ebe.eta[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_gaussian_ofv() {
        let s = SigmaParams::additive(1.0);
        let r = subject_ofv(&single(2.0), &[1.0], &s).unwrap();
        assert!((r.ofv - (2f64.ln() + 2.0)).abs() < 1e-9);
        assert!((r.ofv - 2.6931).abs() < 1e-4);
    }

    #[test]
    fn whitened_residual_scalar() {
        let s = SigmaParams::additive(1.0);
        let ebe = estimate_ebe(&single(2.0), &[1.0], &s).unwrap();
        let lin = linearize(&single(2.0), &[1.0], &s, &ebe.eta).unwrap();
        assert!((lin.whitened()[0] - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_active_omega() {
        let s = SigmaParams::additive(1.0);
        assert!(estimate_ebe(&single(2.0), &[0.0], &s).is_err());
    }
}
