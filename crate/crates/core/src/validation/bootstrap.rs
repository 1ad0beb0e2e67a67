use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::fmt_opt;
use crate::dataset::{StudyDataset, Subject};
use crate::error::{Error, Result};
use crate::estimator::{fit_with, param_name, FitOptions, ParamLayout};
use crate::model::{ModelSpec, ParamId, ParameterSet};
use crate::rng::{replicate_seed, stream_rng};
use crate::summary::{mean, quantile, sample_sd};

/// Above this fraction of failed replicates the summary carries a warning.
pub const FAILURE_WARNING_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub fit: FitOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions { fit: FitOptions { covariance: false, ..FitOptions::default() } }
    }
}

/// Outcome of one bootstrap replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replicate {
    pub index: usize,
    pub converged: bool,
    pub ofv: Option<f64>,
    /// Estimates in [`BootstrapSummary::params`] order; empty on failure.
    pub estimates: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapParam {
    pub id: ParamId,
    pub name: String,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub p2_5: Option<f64>,
    pub p97_5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub params: Vec<BootstrapParam>,
    pub n_requested: usize,
    pub n_converged: usize,
    pub failure_rate: f64,
    /// More than half of the replicates failed.
    pub warning: bool,
    pub replicates: Vec<Replicate>,
}

/// Draw `ds.n_subjects()` subjects with replacement; copies get fresh ids
/// `1..=n` so duplicates are treated as independent subjects.
pub fn resample_subjects(ds: &StudyDataset, seed: u64) -> Result<StudyDataset> {
    let n = ds.subjects.len();
    if n == 0 {
        return Err(Error::InvalidRequest("cannot resample an empty dataset".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let subjects: Vec<Subject> = (0..n)
        .map(|j| {
            let mut s = ds.subjects[rng.random_range(0..n)].clone();
            s.id = j as u32 + 1;
            s
        })
        .collect();
    StudyDataset::new(subjects, ds.lloq)
}

/// Nonparametric bootstrap: `n` subject-resampled datasets, each fitted from
/// `init` (normally the final estimates). Replicate `r` resamples with seed
/// `replicate_seed(seed, r)`; results do not depend on execution order.
pub fn bootstrap(
    ds: &StudyDataset,
    spec: &ModelSpec,
    init: &ParameterSet,
    n: usize,
    seed: u64,
    options: &BootstrapOptions,
) -> Result<BootstrapSummary> {
    if n == 0 {
        return Err(Error::InvalidRequest("bootstrap needs at least one replicate".into()));
    }
    spec.validate(init)?;
    let ids = ParamLayout::new(spec, init).ids;
    let replicates: Vec<Replicate> = (0..n)
        .into_par_iter()
        .map(|r| {
            let outcome = resample_subjects(ds, replicate_seed(seed, r as u64))
                .and_then(|sample| fit_with(&sample, spec, init, &options.fit));
            match outcome {
                Ok(f) if f.converged => Replicate {
                    index: r,
                    converged: true,
                    ofv: Some(f.ofv),
                    estimates: ids.iter().map(|id| id.get(&f.params).unwrap_or(f64::NAN)).collect(),
                    error: None,
                },
                Ok(f) => Replicate {
                    index: r,
                    converged: false,
                    ofv: Some(f.ofv),
                    estimates: vec![],
                    error: Some("did not converge".into()),
                },
                Err(e) => Replicate { index: r, converged: false, ofv: None, estimates: vec![], error: Some(e.to_string()) },
            }
        })
        .collect();

    let ok: Vec<&Replicate> = replicates.iter().filter(|r| r.converged).collect();
    let params = ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let values: Vec<f64> = ok.iter().map(|r| r.estimates[k]).collect();
            BootstrapParam {
                id: *id,
                name: param_name(spec, *id),
                median: quantile(&values, 0.5),
                mean: mean(&values),
                sd: sample_sd(&values),
                p2_5: quantile(&values, 0.025),
                p97_5: quantile(&values, 0.975),
            }
        })
        .collect();
    let failure_rate = 1.0 - ok.len() as f64 / n as f64;
    Ok(BootstrapSummary {
        params,
        n_requested: n,
        n_converged: ok.len(),
        failure_rate,
        warning: failure_rate > FAILURE_WARNING_RATE,
        replicates,
    })
}

pub fn bootstrap_csv(summary: &BootstrapSummary) -> String {
    let mut out = String::from("PARAM,MEDIAN,MEAN,SD,P2.5,P97.5\n");
    for p in &summary.params {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.name,
            fmt_opt(p.median),
            fmt_opt(p.mean),
            fmt_opt(p.sd),
            fmt_opt(p.p2_5),
            fmt_opt(p.p97_5)
        ));
    }
    out
}
