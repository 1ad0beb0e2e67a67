//! Simulation of concentration–time datasets from a population model.
//!
//! Each subject draws from its own random stream (see [`crate::rng`]), so a
//! simulated dataset depends only on the seed, the design and the
//! parameters, never on thread scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariates, EventRecord, Sex, StudyDataset, Subject, VolumeGroup, DEFAULT_LLOQ};
use crate::error::{Error, Result};
use crate::model::{concentration, error_sd, Eta, ModelSpec, ParameterSet, RESIDUAL_SD_FLOOR};
use crate::rng::stream_rng;

/// Nominal sampling times of the reference study, minutes.
pub const DEFAULT_TIMES: [f64; 8] = [5.0, 15.0, 20.0, 25.0, 30.0, 45.0, 60.0, 75.0];
/// Weight-based dose of the reference study, mg/kg.
pub const DEFAULT_DOSE_PER_KG: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "subjects", rename_all = "snake_case")]
pub enum CovariateSource {
    /// Draw covariate sets with replacement from this pool.
    Resample(Vec<Covariates>),
    /// Use these covariate sets in order, one per subject.
    Explicit(Vec<Covariates>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub n_subjects: usize,
    /// Sampling times after the dose, minutes; strictly increasing.
    pub times: Vec<f64>,
    pub dose_per_kg: f64,
    pub covariates: CovariateSource,
    /// When set, subjects are allocated to the high-volume group in this
    /// proportion (evenly interleaved), overriding the source's groups.
    pub fraction_high_volume: Option<f64>,
    pub lloq: f64,
}

impl Default for StudyDesign {
    fn default() -> Self {
        StudyDesign {
            n_subjects: 40,
            times: DEFAULT_TIMES.to_vec(),
            dose_per_kg: DEFAULT_DOSE_PER_KG,
            covariates: CovariateSource::Resample(reference_population()),
            fraction_high_volume: Some(0.5),
            lloq: DEFAULT_LLOQ,
        }
    }
}

impl StudyDesign {
    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("sampling times must be non-empty and strictly increasing".into()));
        }
        if self.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Domain("sampling times must be finite and non-negative".into()));
        }
        if !(self.dose_per_kg > 0.0 && self.dose_per_kg.is_finite()) {
            return Err(Error::Domain("dose per kg must be positive".into()));
        }
        if !(self.lloq >= 0.0) {
            return Err(Error::Domain("LLOQ must be non-negative".into()));
        }
        if let Some(f) = self.fraction_high_volume {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Domain("fraction of high-volume subjects must be in [0, 1]".into()));
            }
        }
        match &self.covariates {
            CovariateSource::Resample(pool) if pool.is_empty() => {
                Err(Error::Domain("covariate pool is empty".into()))
            }
            CovariateSource::Explicit(list) if list.len() != self.n_subjects => Err(Error::Domain(format!(
                "{} explicit covariate sets for {} subjects",
                list.len(),
                self.n_subjects
            ))),
            _ => Ok(()),
        }
    }

    fn volume_group(&self, index: usize) -> Option<VolumeGroup> {
        let f = self.fraction_high_volume?;
        let i = index as f64;
        Some(if ((i + 1.0) * f).floor() > (i * f).floor() { VolumeGroup::High } else { VolumeGroup::Low })
    }
}

/// A 40-subject covariate set reproducing the demographic summary of the
/// reference study: age mean 42.8 months, median 43 [28–54.7]; weight mean
/// 14.7 kg, median 15 [12–18]; orosomucoid available for 37 subjects, mean
/// 0.70 g/L, median 0.65 [0.5–0.8]; 12 girls; 20 subjects per volume group.
pub fn reference_population() -> Vec<Covariates> {
    const WEIGHTS: [f64; 40] = [
        8.5, 9.0, 9.3, 9.6, 10.0, 10.2, 10.5, 10.6, 10.6, 12.0, 12.0, 12.0, 12.2, 12.5, 12.8, 13.0, 13.5, 14.0,
        14.5, 15.0, 15.0, 15.0, 15.2, 15.5, 15.8, 16.0, 16.5, 17.0, 17.5, 18.0, 18.0, 18.0, 18.2, 18.5, 19.0,
        19.5, 20.0, 20.5, 21.0, 22.0,
    ];
    const AGES: [f64; 40] = [
        14.2, 16.0, 18.0, 21.0, 23.0, 24.0, 25.0, 26.0, 27.0, 28.0, 28.0, 31.0, 34.0, 36.0, 38.0, 39.0, 40.0,
        41.0, 42.0, 43.0, 43.0, 45.0, 46.0, 47.0, 48.0, 49.0, 50.0, 52.0, 53.0, 54.0, 56.8, 59.0, 60.0, 61.0,
        62.0, 64.0, 65.0, 66.0, 68.0, 69.0,
    ];
    const AAG: [f64; 37] = [
        0.3, 0.35, 0.4, 0.4, 0.45, 0.45, 0.5, 0.5, 0.5, 0.5, 0.55, 0.55, 0.6, 0.6, 0.6, 0.6, 0.65, 0.65, 0.65,
        0.7, 0.7, 0.7, 0.75, 0.75, 0.8, 0.8, 0.8, 0.8, 0.85, 0.9, 0.9, 0.95, 1.0, 1.05, 1.1, 1.2, 1.3,
    ];
    const NO_AAG: [usize; 3] = [7, 21, 33];
    let mut next_aag = 0;
    (0..40)
        .map(|i| {
            let aag = if NO_AAG.contains(&i) {
                None
            } else {
                let v = AAG[(next_aag * 11) % 37];
                next_aag += 1;
                Some(v)
            };
            Covariates {
                wt: WEIGHTS[i],
                // Weakly associated with weight rather than sorted alongside it.
                age: AGES[(i * 17) % 40],
                sex: if matches!(i % 10, 0 | 3 | 6) { Sex::Female } else { Sex::Male },
                volgrp: if i % 2 == 1 { VolumeGroup::High } else { VolumeGroup::Low },
                aag,
            }
        })
        .collect()
}

/// Independent `N(0, ω²)` draws; zero-variance etas are exactly 0.
pub fn sample_eta(params: &ParameterSet, rng: &mut ChaCha8Rng) -> [f64; 3] {
    Eta::ALL.map(|e| {
        let z: f64 = rng.sample(StandardNormal);
        z * params.omega.variance(e).sqrt()
    })
}

/// Noiseless and observed concentrations for one subject at `times` after
/// a dose given at time 0. Negative values (additive error) are kept.
pub fn simulate_profile(
    spec: &ModelSpec,
    params: &ParameterSet,
    covariates: &Covariates,
    dose: f64,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eta = sample_eta(params, rng);
    let p = spec.individual_params(&params.theta, covariates, &eta)?;
    let truth: Vec<f64> = times.iter().map(|t| concentration(*t, dose, &p)).collect();
    let observed = truth
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            // The likelihood's SD floor is not noise: zero sigma simulates exactly.
            let sd = error_sd(*c, &params.sigma);
            if sd <= RESIDUAL_SD_FLOOR { *c } else { c + z * sd }
        })
        .collect();
    Ok((truth, observed))
}

fn build_subject(id: u32, covariates: Covariates, dose_time: f64, dose: f64, times: &[f64], dv: &[f64]) -> Result<Subject> {
    let mut records = vec![EventRecord::dose(dose_time, dose)];
    records.extend(times.iter().zip(dv).map(|(t, y)| EventRecord::observation(dose_time + t, *y)));
    Subject::new(id, covariates, records)
}

/// Simulate a study under `design`. Subject `i` (ids `1..=n`) uses stream
/// `i − 1` of `seed`: covariates are drawn first, then η, then residuals.
pub fn simulate_dataset(design: &StudyDesign, spec: &ModelSpec, params: &ParameterSet, seed: u64) -> Result<StudyDataset> {
    design.validate()?;
    spec.validate(params)?;
    let subjects: Vec<Subject> = (0..design.n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut covariates = match &design.covariates {
                CovariateSource::Resample(pool) => pool[rng.random_range(0..pool.len())],
                CovariateSource::Explicit(list) => list[i],
            };
            if let Some(g) = design.volume_group(i) {
                covariates.volgrp = g;
            }
            let dose = design.dose_per_kg * covariates.wt;
            let (_, dv) = simulate_profile(spec, params, &covariates, dose, &design.times, &mut rng)?;
            build_subject(i as u32 + 1, covariates, 0.0, dose, &design.times, &dv)
        })
        .collect::<Result<_>>()?;
    StudyDataset::new(subjects, design.lloq)
}

/// Simulate new observations for the subjects, doses and sampling times of
/// `template` (every observation row, censored or not), then censor at the
/// template's LLOQ.
pub fn simulate_like(template: &StudyDataset, spec: &ModelSpec, params: &ParameterSet, seed: u64) -> Result<StudyDataset> {
    spec.validate(params)?;
    let subjects: Vec<Subject> = template
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, i as u64);
            let t0 = s.dose_time();
            let times: Vec<f64> = s.observations().map(|r| r.time - t0).collect();
            let (_, dv) = simulate_profile(spec, params, &s.covariates, s.dose_amount(), &times, &mut rng)?;
            build_subject(s.id, s.covariates, t0, s.dose_amount(), &times, &dv)
        })
        .collect::<Result<_>>()?;
    StudyDataset::new(subjects, template.lloq)
}

/// Flag every observation strictly below `lloq` as missing; raw values kept.
pub fn apply_lloq(ds: StudyDataset, lloq: f64) -> Result<StudyDataset> {
    if !(lloq >= 0.0) {
        return Err(Error::Domain(format!("LLOQ must be non-negative, got {lloq}")));
    }
    Ok(ds.with_lloq(lloq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::summarize_covariates;
    use crate::model::{OmegaMatrix, SigmaParams};

    #[test]
    fn reference_population_matches_published_summary() {
        let ds = StudyDataset::new(
            reference_population()
                .into_iter()
                .enumerate()
                .map(|(i, c)| Subject::new(i as u32 + 1, c, vec![EventRecord::dose(0.0, 1.0)]).unwrap())
                .collect(),
            DEFAULT_LLOQ,
        )
        .unwrap();
        let s = summarize_covariates(&ds);
        let round1 = |x: Option<f64>| (x.unwrap() * 10.0).round() / 10.0;
        let row = |name: &str| {
            let c = s.continuous(name).unwrap();
            (c.n, round1(c.mean), round1(c.median), round1(c.q1), round1(c.q3))
        };
        assert_eq!(row("AGE"), (40, 42.8, 43.0, 28.0, 54.7));
        assert_eq!(row("WT"), (40, 14.7, 15.0, 12.0, 18.0));
        let aag = s.continuous("AAG").unwrap();
        assert_eq!((aag.n, round1(aag.mean)), (37, 0.7));
        assert!((aag.median.unwrap() - 0.65).abs() < 1e-12);
        assert!((aag.q1.unwrap() - 0.5).abs() < 1e-12 && (aag.q3.unwrap() - 0.8).abs() < 1e-12);
        let sex = s.categorical("SEX").unwrap();
        assert_eq!(sex.levels[0].n, 12);
        let vol = s.categorical("VOLGRP").unwrap();
        assert_eq!((vol.levels[0].n, vol.levels[1].n), (20, 20));
    }

    #[test]
    fn even_allocation() {
        let d = StudyDesign::default();
        let high = (0..40).filter(|i| d.volume_group(*i) == Some(VolumeGroup::High)).count();
        assert_eq!(high, 20);
    }

    #[test]
    fn degenerate_randomness_gives_identical_profiles() {
        let mut params = ParameterSet::reference();
        params.omega = OmegaMatrix::zero();
        params.sigma = SigmaParams::proportional(0.0);
        let c = reference_population()[0];
        let design = StudyDesign {
            n_subjects: 5,
            covariates: CovariateSource::Explicit(vec![c; 5]),
            fraction_high_volume: None,
            lloq: 0.0,
            ..StudyDesign::default()
        };
        let ds = simulate_dataset(&design, &ModelSpec::default(), &params, 3).unwrap();
        let first = ds.subjects[0].usable_observations();
        for s in &ds.subjects {
            assert_eq!(s.usable_observations(), first);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let p = ParameterSet::reference();
        let spec = ModelSpec::default();
        let d = StudyDesign::default();
        let a = simulate_dataset(&d, &spec, &p, 11).unwrap();
        let b = simulate_dataset(&d, &spec, &p, 11).unwrap();
        let c = simulate_dataset(&d, &spec, &p, 12).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn lloq_boundary_is_strict() {
        let cov = reference_population()[0];
        let s = Subject::new(
            1,
            cov,
            vec![EventRecord::dose(0.0, 1.0), EventRecord::observation(5.0, 0.05), EventRecord::observation(10.0, 0.049)],
        )
        .unwrap();
        let ds = StudyDataset::new(vec![s], 0.0).unwrap();
        assert_eq!(apply_lloq(ds.clone(), 0.0).unwrap(), ds);
        let censored = apply_lloq(ds, 0.05).unwrap();
        let obs: Vec<bool> = censored.subjects[0].observations().map(|r| r.mdv).collect();
        assert_eq!(obs, vec![false, true]);
        assert_eq!(censored.subjects[0].records[2].dv, Some(0.049));
        assert!(apply_lloq(censored, -1.0).is_err());
    }
}
