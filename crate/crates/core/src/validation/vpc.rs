use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fmt_opt;
use crate::dataset::StudyDataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterSet};
use crate::rng::replicate_seed;
use crate::simulator::simulate_like;
use crate::summary::quantile;

/// Bins with fewer observations than this report missing percentiles.
pub const VPC_MIN_OBSERVATIONS: usize = 3;
const PERCENTILES: [f64; 3] = [0.05, 0.5, 0.95];
const FALLBACK_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Nominal times when every distinct time has enough observation rows,
    /// otherwise equal-count bins.
    #[default]
    Auto,
    /// One bin per distinct time after dose.
    Nominal,
    /// This many bins with (nearly) equal numbers of observation rows.
    EqualCount(usize),
}

/// A time-after-dose interval `[lower, upper]`, labelled by `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VpcBin {
    pub time: f64,
    pub lower: f64,
    pub upper: f64,
    /// Observed 5th/50th/95th percentiles (usable observations only).
    pub observed: [Option<f64>; 3],
    /// 95% band (2.5th–97.5th percentile across simulations) of each
    /// simulated percentile.
    pub simulated: [Option<(f64, f64)>; 3],
    pub n_observed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VpcSummary {
    pub bins: Vec<VpcBin>,
    pub n_simulations: usize,
}

fn observation_times(ds: &StudyDataset) -> Vec<f64> {
    let mut times: Vec<f64> = ds
        .subjects
        .iter()
        .flat_map(|s| {
            let t0 = s.dose_time();
            s.observations().map(move |r| r.time - t0)
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Bin intervals `(label, lower, upper)` covering every observation time.
fn make_bins(ds: &StudyDataset, binning: Binning) -> Result<Vec<(f64, f64, f64)>> {
    let times = observation_times(ds);
    if times.is_empty() {
        return Err(Error::InvalidRequest("dataset has no observation rows".into()));
    }
    let distinct: Vec<f64> = times
        .iter()
        .map(|t| t.to_bits())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(f64::from_bits)
        .collect();
    let nominal = || distinct.iter().map(|t| (*t, *t, *t)).collect::<Vec<_>>();
    let equal_count = |k: usize| -> Result<Vec<(f64, f64, f64)>> {
        if k == 0 {
            return Err(Error::InvalidRequest("number of VPC bins must be positive".into()));
        }
        let k = k.min(times.len());
        let mut bins: Vec<(f64, f64, f64)> = Vec::with_capacity(k);
        for b in 0..k {
            let lo_i = b * times.len() / k;
            let hi_i = (b + 1) * times.len() / k - 1;
            let lower = bins.last().map_or(times[lo_i], |prev| prev.2.max(times[lo_i]));
            let upper = times[hi_i];
            if bins.last().is_some_and(|prev| upper <= prev.2) {
                continue;
            }
            let members: Vec<f64> = times.iter().copied().filter(|t| *t >= lower && *t <= upper).collect();
            bins.push((quantile(&members, 0.5).unwrap_or(lower), lower, upper));
        }
        Ok(bins)
    };
    match binning {
        Binning::Nominal => Ok(nominal()),
        Binning::EqualCount(k) => equal_count(k),
        Binning::Auto => {
            let rich = distinct
                .iter()
                .all(|d| times.iter().filter(|t| *t == d).count() >= VPC_MIN_OBSERVATIONS);
            if rich { Ok(nominal()) } else { equal_count(FALLBACK_BINS) }
        }
    }
}

fn bin_index(bins: &[(f64, f64, f64)], t: f64) -> Option<usize> {
    bins.iter().position(|(_, lo, hi)| t >= *lo && t <= *hi)
}

/// Usable (uncensored) values grouped by bin.
fn binned_values(ds: &StudyDataset, bins: &[(f64, f64, f64)]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); bins.len()];
    for s in &ds.subjects {
        let t0 = s.dose_time();
        for (t, dv) in s.usable_observations() {
            if let Some(b) = bin_index(bins, t - t0) {
                out[b].push(dv);
            }
        }
    }
    out
}

fn percentiles(values: &[f64]) -> [Option<f64>; 3] {
    if values.len() < VPC_MIN_OBSERVATIONS {
        return [None; 3];
    }
    PERCENTILES.map(|p| quantile(values, p))
}

/// Visual predictive check: `n` datasets simulated with the design of `ds`
/// (same subjects, doses and sampling times, censored at its LLOQ); each
/// bin's observed percentiles are compared with the 95% range of the
/// simulated percentiles. Replicate `r` uses seed `replicate_seed(seed, r)`.
pub fn vpc(
    ds: &StudyDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    n: usize,
    seed: u64,
    binning: Binning,
) -> Result<VpcSummary> {
    if n == 0 {
        return Err(Error::InvalidRequest("VPC needs at least one simulation".into()));
    }
    spec.validate(params)?;
    let bins = make_bins(ds, binning)?;
    let observed = binned_values(ds, &bins);

    let simulated: Vec<Vec<[Option<f64>; 3]>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let sim = simulate_like(ds, spec, params, replicate_seed(seed, r as u64))?;
            Ok(binned_values(&sim, &bins).iter().map(|v| percentiles(v)).collect())
        })
        .collect::<Result<_>>()?;

    let bins = bins
        .iter()
        .enumerate()
        .map(|(b, &(time, lower, upper))| {
            let band = |k: usize| {
                let values: Vec<f64> = simulated.iter().filter_map(|rep| rep[b][k]).collect();
                Some((quantile(&values, 0.025)?, quantile(&values, 0.975)?))
            };
            VpcBin {
                time,
                lower,
                upper,
                observed: percentiles(&observed[b]),
                simulated: [band(0), band(1), band(2)],
                n_observed: observed[b].len(),
            }
        })
        .collect();
    Ok(VpcSummary { bins, n_simulations: n })
}

pub fn vpc_csv(summary: &VpcSummary) -> String {
    let mut out = String::from(
        "BIN_TIME,OBS_P5,OBS_P50,OBS_P95,SIM_P5_LO,SIM_P5_HI,SIM_P50_LO,SIM_P50_HI,SIM_P95_LO,SIM_P95_HI\n",
    );
    for b in &summary.bins {
        out.push_str(&b.time.to_string());
        for o in b.observed {
            out.push(',');
            out.push_str(&fmt_opt(o));
        }
        for s in b.simulated {
            out.push(',');
            out.push_str(&fmt_opt(s.map(|x| x.0)));
            out.push(',');
            out.push_str(&fmt_opt(s.map(|x| x.1)));
        }
        out.push('\n');
    }
    out
}
