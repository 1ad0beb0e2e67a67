use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::Serialize;

use super::foce::{subject_ofv, IndividualModel, SubjectFoce};
use super::optimize::{minimize_bfgs, numerical_hessian, OptimizerSettings};
use crate::dataset::{StudyDataset, Subject, VolumeGroup};
use crate::diagnostics::{self, Shrinkage};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamId, ParameterSet, ThetaVector, Eta};

/// Relative step of the covariance-step Hessian in estimation space.
pub const HESSIAN_STEP: f64 = 1e-4;

/// One subject under the population model, with etas restricted to the
/// active (positive-variance) ones.
pub struct PkSubject<'a> {
    spec: &'a ModelSpec,
    theta: &'a ThetaVector,
    subject: &'a Subject,
    active: &'a [Eta],
    /// Time since dose of each usable observation.
    times: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> PkSubject<'a> {
    pub fn new(spec: &'a ModelSpec, theta: &'a ThetaVector, subject: &'a Subject, active: &'a [Eta]) -> Self {
        let t0 = subject.dose_time();
        let (times, y) = subject.usable_observations().into_iter().map(|(t, dv)| (t - t0, dv)).unzip();
        PkSubject { spec, theta, subject, active, times, y }
    }

    /// Expand active etas to the full (CL, V, KA) vector.
    pub fn full_eta(&self, eta: &[f64]) -> [f64; 3] {
        let mut full = [0.0; 3];
        for (e, v) in self.active.iter().zip(eta) {
            full[e.index()] = *v;
        }
        full
    }

    /// Predictions at arbitrary times since dose.
    pub fn predict_at(&self, eta: &[f64; 3], times: &[f64]) -> Result<Vec<f64>> {
        let p = self.spec.individual_params(self.theta, &self.subject.covariates, eta)?;
        let dose = self.subject.dose_amount();
        Ok(times.iter().map(|t| crate::model::concentration(*t, dose, &p)).collect())
    }
}

impl IndividualModel for PkSubject<'_> {
    fn observations(&self) -> &[f64] {
        &self.y
    }

    fn n_eta(&self) -> usize {
        self.active.len()
    }

    fn predict(&self, eta: &[f64], out: &mut [f64]) -> Result<()> {
        let full = self.full_eta(eta);
        let p = self.spec.individual_params(self.theta, &self.subject.covariates, &full)?;
        let dose = self.subject.dose_amount();
        for (o, t) in out.iter_mut().zip(&self.times) {
            *o = crate::model::concentration(*t, dose, &p);
        }
        Ok(())
    }
}

/// Objective value with each subject's contribution and EBE.
#[derive(Debug, Clone)]
pub struct FoceEvaluation {
    pub ofv: f64,
    pub subjects: Vec<SubjectFoce>,
}

/// FOCE-I objective, `Σ_i ln|V_i| + e_iᵀV_i⁻¹e_i`, without the `n·ln(2π)`
/// constant. Subjects are evaluated in parallel and summed in dataset order.
pub fn foce_ofv(ds: &StudyDataset, spec: &ModelSpec, params: &ParameterSet) -> Result<FoceEvaluation> {
    spec.validate(params)?;
    let active = spec.active_etas(params);
    let omega: Vec<f64> = active.iter().map(|e| params.omega.variance(*e)).collect();
    let subjects: Vec<SubjectFoce> = ds
        .subjects
        .par_iter()
        .map(|s| subject_ofv(&PkSubject::new(spec, &params.theta, s, &active), &omega, &params.sigma))
        .collect::<Result<_>>()?;
    let ofv = subjects.iter().map(|s| s.ofv).sum();
    Ok(FoceEvaluation { ofv, subjects })
}

/// Maps estimated parameters to an unconstrained vector: logarithms for
/// positive quantities (variances for omega, SDs for sigma), identity for
/// covariate coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub ids: Vec<ParamId>,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec, params: &ParameterSet) -> Self {
        ParamLayout { ids: spec.estimated_ids(params) }
    }

    pub fn pack(&self, p: &ParameterSet) -> Vec<f64> {
        self.ids
            .iter()
            .map(|id| {
                let v = id.get(p).unwrap_or(f64::NAN);
                if id.is_positive() { v.ln() } else { v }
            })
            .collect()
    }

    pub fn unpack(&self, x: &[f64], base: &ParameterSet) -> ParameterSet {
        let mut p = base.clone();
        for (id, v) in self.ids.iter().zip(x) {
            id.set(&mut p, if id.is_positive() { v.exp() } else { *v });
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParameterUncertainty {
    pub id: ParamId,
    pub estimate: f64,
    pub se: f64,
    pub rse_percent: f64,
    pub ci95: (f64, f64),
}

impl ParameterUncertainty {
    pub fn new(id: ParamId, estimate: f64, se: f64) -> Self {
        ParameterUncertainty {
            id,
            estimate,
            se,
            rse_percent: 100.0 * se / estimate.abs(),
            ci95: (estimate - 1.96 * se, estimate + 1.96 * se),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectEbe {
    pub id: u32,
    /// Indexed by [`Eta`]; inactive etas are 0.
    pub eta: [f64; 3],
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub ofv: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_function_evals: usize,
    pub grad_norm: f64,
    /// Estimated parameters in estimation order.
    pub estimated: Vec<ParamId>,
    /// Standard errors, when the covariance step ran and succeeded.
    pub uncertainty: Option<Vec<ParameterUncertainty>>,
    pub covariance_error: Option<String>,
    pub ebes: Vec<SubjectEbe>,
    pub eta_shrinkage: [Option<Shrinkage>; 3],
    pub eps_shrinkage: Option<Shrinkage>,
}

impl FitResult {
    pub fn uncertainty_of(&self, id: ParamId) -> Option<&ParameterUncertainty> {
        self.uncertainty.as_ref()?.iter().find(|u| u.id == id)
    }

    /// Subjects whose EBE search did not converge at the final estimates.
    pub fn flagged_subjects(&self) -> Vec<u32> {
        self.ebes.iter().filter(|e| !e.converged).map(|e| e.id).collect()
    }

    /// Display name of a parameter, using the covariate map for coefficients.
    pub fn param_name(&self, id: ParamId) -> String {
        param_name(&self.spec, id)
    }
}

pub fn param_name(spec: &ModelSpec, id: ParamId) -> String {
    match id {
        ParamId::Covariate(i) => spec.covariates.get(i).map_or_else(|| id.to_string(), |e| e.to_string()),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub optimizer: OptimizerSettings,
    /// Run the covariance step after a converged fit.
    pub covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { optimizer: OptimizerSettings::default(), covariance: true }
    }
}

/// Fit with default options.
pub fn fit(ds: &StudyDataset, spec: &ModelSpec, init: &ParameterSet) -> Result<FitResult> {
    fit_with(ds, spec, init, &FitOptions::default())
}

pub fn fit_with(ds: &StudyDataset, spec: &ModelSpec, init: &ParameterSet, options: &FitOptions) -> Result<FitResult> {
    spec.validate(init)?;
    let layout = ParamLayout::new(spec, init);
    if layout.ids.contains(&ParamId::FLarge)
        && !ds.subjects.iter().any(|s| s.covariates.volgrp == VolumeGroup::High)
    {
        return Err(Error::Estimation(
            "F_LARGE is estimated but no subject is in the high-volume group".into(),
        ));
    }
    let x0 = layout.pack(init);
    let objective = |x: &[f64]| foce_ofv(ds, spec, &layout.unpack(x, init)).ok().map(|e| e.ofv);
    let result = minimize_bfgs(objective, &x0, &options.optimizer)
        .ok_or_else(|| Error::Estimation("objective is not finite at the initial estimates".into()))?;

    let params = layout.unpack(&result.x, init);
    let mut fit = posthoc(ds, spec, &params)?;
    fit.converged = result.converged;
    fit.iterations = result.iterations;
    fit.n_function_evals = result.evaluations;
    fit.grad_norm = result.grad_norm;
    fit.estimated = layout.ids.clone();

    if options.covariance {
        if fit.converged {
            match standard_errors(ds, spec, &fit) {
                Ok(u) => fit.uncertainty = Some(u),
                Err(e) => fit.covariance_error = Some(e.to_string()),
            }
        } else {
            fit.covariance_error = Some("skipped: estimation did not converge".into());
        }
    }
    Ok(fit)
}

/// Evaluate EBEs, OFV and shrinkage at fixed parameters without estimation.
pub fn posthoc(ds: &StudyDataset, spec: &ModelSpec, params: &ParameterSet) -> Result<FitResult> {
    let eval = foce_ofv(ds, spec, params)?;
    let active = spec.active_etas(params);
    let ebes: Vec<SubjectEbe> = ds
        .subjects
        .iter()
        .zip(&eval.subjects)
        .map(|(s, sf)| {
            let mut eta = [0.0; 3];
            for (e, v) in active.iter().zip(&sf.ebe.eta) {
                eta[e.index()] = *v;
            }
            SubjectEbe { id: s.id, eta, converged: sf.ebe.converged }
        })
        .collect();
    let eta_shrinkage = Eta::ALL.map(|e| {
        let values: Vec<f64> = ebes.iter().map(|b| b.eta[e.index()]).collect();
        diagnostics::eta_shrinkage(&values, params.omega.variance(e))
    });
    let iwres = diagnostics::iwres_values(ds, spec, params, &ebes)?;
    Ok(FitResult {
        spec: spec.clone(),
        params: params.clone(),
        ofv: eval.ofv,
        converged: true,
        iterations: 0,
        n_function_evals: 1,
        grad_norm: 0.0,
        estimated: ParamLayout::new(spec, params).ids,
        uncertainty: None,
        covariance_error: None,
        ebes,
        eta_shrinkage,
        eps_shrinkage: diagnostics::eps_shrinkage(&iwres),
    })
}

/// Covariance step: central-difference Hessian `H` of the OFV in estimation
/// space, covariance `2·H⁻¹`, delta-method back-transform to natural scale.
pub fn standard_errors(ds: &StudyDataset, spec: &ModelSpec, fit: &FitResult) -> Result<Vec<ParameterUncertainty>> {
    let layout = ParamLayout { ids: fit.estimated.clone() };
    let x = layout.pack(&fit.params);
    let objective = |x: &[f64]| foce_ofv(ds, spec, &layout.unpack(x, &fit.params)).ok().map(|e| e.ofv);
    let hessian = numerical_hessian(objective, &x, HESSIAN_STEP)
        .ok_or_else(|| Error::Estimation("objective failed during the covariance step".into()))?;
    covariance_report(&layout, &fit.params, hessian)
}

/// Turn an OFV Hessian in estimation space into natural-scale uncertainties.
pub fn covariance_report(
    layout: &ParamLayout,
    params: &ParameterSet,
    hessian: nalgebra::DMatrix<f64>,
) -> Result<Vec<ParameterUncertainty>> {
    let chol = Cholesky::new(hessian)
        .ok_or_else(|| Error::Estimation("OFV Hessian is not positive definite".into()))?;
    let cov = chol.inverse() * 2.0;
    Ok(layout
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let estimate = id.get(params).unwrap_or(f64::NAN);
            let se_x = cov[(i, i)].max(0.0).sqrt();
            let se = if id.is_positive() { estimate * se_x } else { se_x };
            ParameterUncertainty::new(*id, estimate, se)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reporting_convention() {
        let u = ParameterUncertainty::new(ParamId::ClF, 0.15, 0.021);
        assert!((u.rse_percent - 14.0).abs() < 1e-9);
        assert!((u.ci95.0 - 0.10884).abs() < 1e-12);
        assert!((u.ci95.1 - 0.19116).abs() < 1e-12);
    }

    #[test]
    fn layout_round_trip() {
        let spec = ModelSpec::default();
        let p = ParameterSet::reference();
        let layout = ParamLayout::new(&spec, &p);
        assert_eq!(layout.ids.len(), 9);
        let back = layout.unpack(&layout.pack(&p), &p);
        for id in &layout.ids {
            let (a, b) = (id.get(&p).unwrap(), id.get(&back).unwrap());
            assert!((a - b).abs() < 1e-14 * a.abs().max(1.0), "{id}");
        }
    }

    #[test]
    fn fixed_and_inactive_parameters_are_not_estimated() {
        let mut spec = ModelSpec::default();
        spec.fixed.insert(ParamId::FLarge);
        let mut p = ParameterSet::reference();
        p.omega.variances[2] = 0.0;
        let ids = ParamLayout::new(&spec, &p).ids;
        assert!(!ids.contains(&ParamId::FLarge));
        assert!(!ids.contains(&ParamId::Omega(Eta::Ka)));
        assert!(ids.contains(&ParamId::Omega(Eta::Cl)));
    }
}
