//! Stepwise covariate model building: forward inclusion, then backward
//! elimination, both driven by ΔOFV against a chi-squared(1) threshold.

use serde::{Deserialize, Serialize};

use super::fit::{fit_with, FitOptions, FitResult};
use crate::dataset::StudyDataset;
use crate::error::Result;
use crate::model::{CovariateEffect, CovariateName, ModelSpec, ParameterSet, PkParameter};
use crate::summary::quantile;

/// χ²(1) 95th percentile.
pub const DEFAULT_THRESHOLD: f64 = 3.84;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    /// Minimum OFV decrease for a relationship to enter.
    pub forward_threshold: f64,
    /// Minimum OFV increase on removal for a relationship to stay.
    pub backward_threshold: f64,
    pub fit: FitOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            forward_threshold: DEFAULT_THRESHOLD,
            backward_threshold: DEFAULT_THRESHOLD,
            fit: FitOptions { covariance: false, ..FitOptions::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
}

/// One candidate fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub phase: Phase,
    pub round: usize,
    pub effect: CovariateEffect,
    pub ofv: Option<f64>,
    /// Forward: OFV decrease from adding. Backward: OFV increase from removing.
    pub delta_ofv: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
    /// Whether this step was taken (added forward, removed backward).
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub base_ofv: f64,
    pub final_fit: FitResult,
    pub trace: Vec<TraceEntry>,
}

impl SearchResult {
    pub fn spec(&self) -> &ModelSpec {
        &self.final_fit.spec
    }

    pub fn includes(&self, parameter: PkParameter, covariate: CovariateName) -> bool {
        self.spec().covariates.iter().any(|e| e.parameter == parameter && e.covariate == covariate)
    }
}

/// Reference value for a candidate: the median for continuous covariates
/// (the model's reference weight for WT), 0 for categorical codes.
pub fn reference_value(ds: &StudyDataset, spec: &ModelSpec, covariate: CovariateName) -> f64 {
    if covariate.is_categorical() {
        return 0.0;
    }
    if covariate == CovariateName::Wt {
        return spec.reference_weight;
    }
    let values: Vec<f64> = ds.subjects.iter().filter_map(|s| covariate.value(&s.covariates)).collect();
    quantile(&values, 0.5).unwrap_or(0.0)
}

fn add_effect(spec: &ModelSpec, params: &ParameterSet, effect: CovariateEffect) -> (ModelSpec, ParameterSet) {
    let mut p = params.clone();
    // A zero coefficient is the identity for every form, so the warm start
    // reproduces the smaller model exactly.
    p.theta.covariate_effects.push(0.0);
    (spec.with_effect(effect), p)
}

fn remove_effect(spec: &ModelSpec, params: &ParameterSet, index: usize) -> (ModelSpec, ParameterSet) {
    let mut p = params.clone();
    p.theta.covariate_effects.remove(index);
    (spec.without_effect(index), p)
}

fn try_fit(ds: &StudyDataset, spec: &ModelSpec, init: &ParameterSet, options: &FitOptions) -> (Option<FitResult>, Option<String>) {
    match fit_with(ds, spec, init, options) {
        Ok(f) if f.converged => (Some(f), None),
        Ok(f) => (None, Some(format!("did not converge (OFV {:.4})", f.ofv))),
        Err(e) => (None, Some(e.to_string())),
    }
}

pub fn covariate_search(
    ds: &StudyDataset,
    base: &ModelSpec,
    init: &ParameterSet,
    candidates: &[(PkParameter, CovariateName)],
    options: &SearchOptions,
) -> Result<SearchResult> {
    let base_fit = fit_with(ds, base, init, &options.fit)?;
    let base_ofv = base_fit.ofv;
    let mut current = base_fit;
    let mut trace = Vec::new();
    let mut remaining: Vec<(PkParameter, CovariateName)> = candidates.to_vec();

    let mut round = 0;
    while !remaining.is_empty() {
        round += 1;
        let mut best: Option<(usize, f64, FitResult)> = None;
        for (ci, &(parameter, covariate)) in remaining.iter().enumerate() {
            for &form in covariate.forms() {
                let effect = CovariateEffect {
                    parameter,
                    covariate,
                    form,
                    reference: reference_value(ds, &current.spec, covariate),
                };
                let (spec, p0) = add_effect(&current.spec, &current.params, effect);
                let (fit, error) = try_fit(ds, &spec, &p0, &options.fit);
                let delta = fit.as_ref().map(|f| current.ofv - f.ofv);
                trace.push(TraceEntry {
                    phase: Phase::Forward,
                    round,
                    effect,
                    ofv: fit.as_ref().map(|f| f.ofv),
                    delta_ofv: delta,
                    converged: fit.is_some(),
                    error,
                    accepted: false,
                });
                if let (Some(f), Some(d)) = (fit, delta) {
                    if best.as_ref().is_none_or(|(_, bd, _)| d > *bd) {
                        best = Some((ci, d, f));
                    }
                }
            }
        }
        match best {
            Some((ci, delta, fit)) if delta >= options.forward_threshold => {
                let added = *fit.spec.covariates.last().expect("candidate fit has the new effect");
                if let Some(entry) = trace
                    .iter_mut()
                    .rev()
                    .find(|t| t.phase == Phase::Forward && t.round == round && t.effect == added)
                {
                    entry.accepted = true;
                }
                remaining.remove(ci);
                current = fit;
            }
            _ => break,
        }
    }

    let mut round = 0;
    while !current.spec.covariates.is_empty() {
        round += 1;
        let mut weakest: Option<(f64, FitResult, usize)> = None;
        for i in 0..current.spec.covariates.len() {
            let effect = current.spec.covariates[i];
            let (spec, p0) = remove_effect(&current.spec, &current.params, i);
            let (fit, error) = try_fit(ds, &spec, &p0, &options.fit);
            let delta = fit.as_ref().map(|f| f.ofv - current.ofv);
            trace.push(TraceEntry {
                phase: Phase::Backward,
                round,
                effect,
                ofv: fit.as_ref().map(|f| f.ofv),
                delta_ofv: delta,
                converged: fit.is_some(),
                error,
                accepted: false,
            });
            if let (Some(f), Some(d)) = (fit, delta) {
                if weakest.as_ref().is_none_or(|(wd, _, _)| d < *wd) {
                    weakest = Some((d, f, trace.len() - 1));
                }
            }
        }
        match weakest {
            Some((delta, fit, entry)) if delta < options.backward_threshold => {
                trace[entry].accepted = true;
                current = fit;
            }
            _ => break,
        }
    }

    Ok(SearchResult { base_ofv, final_fit: current, trace })
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("PHASE,ROUND,RELATIONSHIP,OFV,DELTA_OFV,CONVERGED,ACCEPTED,NOTE\n");
    let num = |v: Option<f64>| v.map_or_else(|| ".".to_string(), |x| format!("{x:.6}"));
    for t in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            match t.phase {
                Phase::Forward => "forward",
                Phase::Backward => "backward",
            },
            t.round,
            t.effect,
            num(t.ofv),
            num(t.delta_ofv),
            u8::from(t.converged),
            u8::from(t.accepted),
            t.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    out
}
