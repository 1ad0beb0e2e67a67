//! Goodness-of-fit quantities for a completed fit: population and individual
//! predictions, IWRES, CWRES and shrinkage.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::StudyDataset;
use crate::error::{Error, Result};
use crate::estimator::{linearize, FitResult, PkSubject, SubjectEbe};
use crate::model::{error_sd, Eta, ModelSpec, ParameterSet};
use crate::summary::sample_sd;

/// Shrinkage as a fraction. The raw value may be negative; reports use the
/// value clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Shrinkage {
    pub raw: f64,
}

impl Shrinkage {
    pub fn clamped(self) -> f64 {
        self.raw.clamp(0.0, 1.0)
    }

    pub fn percent(self) -> f64 {
        100.0 * self.clamped()
    }
}

/// `1 − SD(η̂)/ω` with the n−1 SD. `None` when ω is zero or fewer than two
/// subjects are available.
pub fn eta_shrinkage(etas: &[f64], omega_variance: f64) -> Option<Shrinkage> {
    if omega_variance <= 0.0 {
        return None;
    }
    let sd = sample_sd(etas)?;
    Some(Shrinkage { raw: 1.0 - sd / omega_variance.sqrt() })
}

/// `1 − SD(IWRES)` with the n−1 SD.
pub fn eps_shrinkage(iwres: &[f64]) -> Option<Shrinkage> {
    sample_sd(iwres).map(|sd| Shrinkage { raw: 1.0 - sd })
}

/// One goodness-of-fit row per usable observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GofRow {
    pub id: u32,
    pub time: f64,
    pub dv: f64,
    pub pred: f64,
    pub ipred: f64,
    pub iwres: f64,
    pub cwres: f64,
}

fn ebe_for(ebes: &[SubjectEbe], id: u32) -> Result<&SubjectEbe> {
    ebes.iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::InvalidRequest(format!("no EBE for subject {id}")))
}

/// PRED, IPRED and IWRES for every usable observation; CWRES is left as NaN.
pub fn predictions_at(
    ds: &StudyDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    ebes: &[SubjectEbe],
) -> Result<Vec<GofRow>> {
    let active = spec.active_etas(params);
    let per_subject: Vec<Vec<GofRow>> = ds
        .subjects
        .par_iter()
        .map(|s| {
            let m = PkSubject::new(spec, &params.theta, s, &active);
            let eta = ebe_for(ebes, s.id)?.eta;
            let t0 = s.dose_time();
            let obs = s.usable_observations();
            let rel: Vec<f64> = obs.iter().map(|(t, _)| t - t0).collect();
            let pred = m.predict_at(&[0.0; 3], &rel)?;
            let ipred = m.predict_at(&eta, &rel)?;
            Ok(obs
                .iter()
                .zip(pred.iter().zip(&ipred))
                .map(|(&(time, dv), (&pred, &ipred))| GofRow {
                    id: s.id,
                    time,
                    dv,
                    pred,
                    ipred,
                    iwres: (dv - ipred) / error_sd(ipred, &params.sigma),
                    cwres: f64::NAN,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

pub fn predictions(ds: &StudyDataset, fit: &FitResult) -> Result<Vec<GofRow>> {
    predictions_at(ds, &fit.spec, &fit.params, &fit.ebes)
}

pub fn iwres_values(ds: &StudyDataset, spec: &ModelSpec, params: &ParameterSet, ebes: &[SubjectEbe]) -> Result<Vec<f64>> {
    Ok(predictions_at(ds, spec, params, ebes)?.into_iter().map(|r| r.iwres).collect())
}

/// CWRES for every usable observation, in dataset order: `L⁻¹e` from the
/// same linearization that defines the objective function.
pub fn cwres(ds: &StudyDataset, fit: &FitResult) -> Result<Vec<f64>> {
    let (spec, params) = (&fit.spec, &fit.params);
    let active = spec.active_etas(params);
    let omega: Vec<f64> = active.iter().map(|e| params.omega.variance(*e)).collect();
    let per_subject: Vec<Vec<f64>> = ds
        .subjects
        .par_iter()
        .map(|s| {
            if s.n_usable() == 0 {
                return Ok(vec![]);
            }
            let m = PkSubject::new(spec, &params.theta, s, &active);
            let full = ebe_for(&fit.ebes, s.id)?.eta;
            let eta: Vec<f64> = active.iter().map(|e| full[e.index()]).collect();
            let lin = linearize(&m, &omega, &params.sigma, &eta)
                .map_err(|e| Error::Evaluation(format!("subject {}: {e}", s.id)))?;
            Ok(lin.whitened().iter().copied().collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// Full GOF table with CWRES filled in.
pub fn gof_table(ds: &StudyDataset, fit: &FitResult) -> Result<Vec<GofRow>> {
    let mut rows = predictions(ds, fit)?;
    for (row, c) in rows.iter_mut().zip(cwres(ds, fit)?) {
        row.cwres = c;
    }
    Ok(rows)
}

pub fn gof_csv(rows: &[GofRow]) -> String {
    let mut out = String::from("ID,TIME,DV,PRED,IPRED,IWRES,CWRES\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id, r.time, r.dv, r.pred, r.ipred, r.iwres, r.cwres
        ));
    }
    out
}

/// η- and ε-shrinkage recomputed from a fit's EBEs.
pub fn shrinkage(ds: &StudyDataset, fit: &FitResult) -> Result<([Option<Shrinkage>; 3], Option<Shrinkage>)> {
    let eta = Eta::ALL.map(|e| {
        let values: Vec<f64> = fit.ebes.iter().map(|b| b.eta[e.index()]).collect();
        eta_shrinkage(&values, fit.params.omega.variance(e))
    });
    let iw = iwres_values(ds, &fit.spec, &fit.params, &fit.ebes)?;
    Ok((eta, eps_shrinkage(&iw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ebes_give_full_shrinkage() {
        let s = eta_shrinkage(&[0.0; 10], 0.2).unwrap();
        assert_eq!(s.raw, 1.0);
        assert_eq!(s.percent(), 100.0);
    }

    #[test]
    fn reporting_convention() {
        // SD(η̂) = 0.361 against ω = 0.41
        let s = Shrinkage { raw: 1.0 - 0.361 / 0.41 };
        assert!((s.percent() - 12.0).abs() < 0.1);
    }

    #[test]
    fn zero_omega_is_undefined() {
        assert!(eta_shrinkage(&[0.1, -0.1], 0.0).is_none());
    }

    #[test]
    fn negative_shrinkage_is_clamped_but_kept() {
        let s = eta_shrinkage(&[1.0, -1.0], 0.25).unwrap();
        assert!(s.raw < 0.0);
        assert_eq!(s.clamped(), 0.0);
    }
}
