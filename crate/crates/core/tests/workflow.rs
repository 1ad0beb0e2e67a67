//! End-to-end behaviour of estimation, covariate search, bootstrap, VPC and
//! simulation on small synthetic studies.

use poppk_core::dataset::{parse_dataset, StudyDataset};
use poppk_core::estimator::{covariate_search, fit_with, posthoc, FitOptions, SearchOptions};
use poppk_core::model::{Eta, ModelSpec, OmegaMatrix, ParamId, ParameterSet, SigmaParams, ThetaVector};
use poppk_core::simulator::{simulate_dataset, CovariateSource, StudyDesign};
use poppk_core::validation::{bootstrap, vpc, Binning, BootstrapOptions};
use proptest::prelude::*;

fn no_covariance() -> FitOptions {
    FitOptions { covariance: false, ..FitOptions::default() }
}

fn precise_population() -> ParameterSet {
    ParameterSet { omega: OmegaMatrix::zero(), sigma: SigmaParams::proportional(0.01), ..ParameterSet::reference() }
}

#[test]
fn near_noiseless_recovery_and_restart_at_optimum() {
    let truth = precise_population();
    let spec = ModelSpec::default();
    let ds = simulate_dataset(&StudyDesign::default(), &spec, &truth, 7).unwrap();
    let init = ParameterSet {
        theta: ThetaVector { cl_f: 0.2, v_f: 10.0, ka: 0.25, wt_exp: 0.6, f_large: 1.0, ..ThetaVector::reference() },
        sigma: SigmaParams::proportional(0.05),
        ..truth.clone()
    };
    let fit = fit_with(&ds, &spec, &init, &no_covariance()).unwrap();
    assert!(fit.converged);
    for id in [ParamId::ClF, ParamId::VF, ParamId::Ka, ParamId::WtExp, ParamId::FLarge] {
        let (est, tru) = (id.get(&fit.params).unwrap(), id.get(&truth).unwrap());
        assert!(((est - tru) / tru).abs() < 0.01, "{id}: {est} vs {tru}");
    }

    let again = fit_with(&ds, &spec, &fit.params, &no_covariance()).unwrap();
    assert!(again.converged);
    assert!(again.iterations <= 3, "{} iterations", again.iterations);
    assert!((again.ofv - fit.ofv).abs() < 1e-6);
}

#[test]
fn empty_candidate_list_keeps_base_model() {
    let truth = precise_population();
    let base = ModelSpec::default();
    let ds = simulate_dataset(&StudyDesign::default(), &base, &truth, 3).unwrap();
    let result = covariate_search(&ds, &base, &truth, &[], &SearchOptions::default()).unwrap();
    assert!(result.trace.is_empty());
    assert_eq!(result.spec(), &base);
    assert_eq!(result.final_fit.ofv, result.base_ofv);
}

#[test]
fn rich_noiseless_design_has_low_shrinkage() {
    let truth = ParameterSet { sigma: SigmaParams::proportional(0.01), ..ParameterSet::reference() };
    let spec = ModelSpec::default();
    let design = StudyDesign {
        n_subjects: 1000,
        times: (1..=30).map(|i| 2.0 * i as f64 + 0.2 * (i * i) as f64).collect(),
        ..StudyDesign::default()
    };
    let ds = simulate_dataset(&design, &spec, &truth, 11).unwrap();
    let fit = posthoc(&ds, &spec, &truth).unwrap();
    for eta in Eta::ALL {
        let s = fit.eta_shrinkage[eta.index()].unwrap();
        assert!(s.percent() < 5.0, "{eta:?} shrinkage {}%", s.percent());
    }
}

#[test]
fn bootstrap_of_identical_subjects_has_zero_width() {
    let truth = ParameterSet { omega: OmegaMatrix::zero(), ..ParameterSet::reference() };
    let mut spec = ModelSpec::default();
    spec.fixed.extend([ParamId::VF, ParamId::Ka, ParamId::WtExp, ParamId::FLarge, ParamId::SigmaProp]);
    let one = simulate_dataset(&StudyDesign { n_subjects: 1, ..StudyDesign::default() }, &spec, &truth, 5).unwrap();
    let subjects = (1..=10)
        .map(|id| {
            let mut s = one.subjects[0].clone();
            s.id = id;
            s
        })
        .collect();
    let ds = StudyDataset::new(subjects, one.lloq).unwrap();
    let summary = bootstrap(&ds, &spec, &truth, 4, 9, &BootstrapOptions::default()).unwrap();
    assert_eq!(summary.n_converged, 4);
    let cl = &summary.params[0];
    assert_eq!(cl.id, ParamId::ClF);
    let (lo, hi) = (cl.p2_5.unwrap(), cl.p97_5.unwrap());
    assert!((hi - lo).abs() <= 1e-12 * hi, "{lo} .. {hi}");
}

#[test]
fn single_simulation_vpc_collapses_bands() {
    let truth = ParameterSet::reference();
    let spec = ModelSpec::default();
    let ds = simulate_dataset(&StudyDesign::default(), &spec, &truth, 2).unwrap();
    let summary = vpc(&ds, &spec, &truth, 1, 4, Binning::Auto).unwrap();
    assert_eq!(summary.bins.len(), 8);
    for bin in &summary.bins {
        for (lo, hi) in bin.simulated.iter().flatten() {
            assert_eq!(lo, hi);
        }
    }
}

#[test]
fn vpc_detects_misspecified_clearance() {
    let truth = ParameterSet::reference();
    let spec = ModelSpec::default();
    let mut doubled = truth.clone();
    doubled.theta.cl_f *= 2.0;
    let ds = simulate_dataset(&StudyDesign::default(), &spec, &doubled, 8).unwrap();
    let summary = vpc(&ds, &spec, &truth, 200, 4, Binning::Auto).unwrap();
    let below = summary
        .bins
        .iter()
        .filter(|b| matches!((b.observed[1], b.simulated[1]), (Some(obs), Some((lo, _))) if obs < lo))
        .count();
    assert!(below >= 4, "observed median below the band in only {below} bins");

    let matched = simulate_dataset(&StudyDesign::default(), &spec, &truth, 8).unwrap();
    let summary = vpc(&matched, &spec, &truth, 200, 4, Binning::Auto).unwrap();
    let outside = summary
        .bins
        .iter()
        .filter(|b| matches!((b.observed[1], b.simulated[1]), (Some(obs), Some((lo, hi))) if obs < lo || obs > hi))
        .count();
    assert!(outside <= 1, "correct model outside the median band in {outside} bins");
}

/// Under the true model the observed median should fall inside each bin's
/// 95% band about 95% of the time.
#[test]
fn vpc_median_band_is_calibrated() {
    let truth = ParameterSet::reference();
    let spec = ModelSpec::default();
    let (reps, mut inside, mut total) = (60u64, 0usize, 0usize);
    for r in 0..reps {
        let ds = simulate_dataset(&StudyDesign::default(), &spec, &truth, 500 + r).unwrap();
        let summary = vpc(&ds, &spec, &truth, 200, 9000 + r, Binning::Auto).unwrap();
        for b in &summary.bins {
            total += 1;
            inside += usize::from(matches!((b.observed[1], b.simulated[1]), (Some(o), Some((lo, hi))) if lo <= o && o <= hi));
        }
    }
    let rate = inside as f64 / total as f64;
    assert!((0.90..=0.99).contains(&rate), "coverage {rate}");
}

#[test]
fn simulated_study_has_expected_shape() {
    let spec = ModelSpec::default();
    let ds = simulate_dataset(&StudyDesign::default(), &spec, &ParameterSet::reference(), 1).unwrap();
    let reparsed = parse_dataset(&ds.to_csv(), ds.lloq).unwrap();
    assert_eq!(reparsed.n_subjects(), 40);
    assert_eq!(reparsed.subjects.iter().map(|s| s.records.len()).sum::<usize>(), 360);
    assert_eq!(reparsed.n_observation_rows(), 320);
    assert_eq!(reparsed, ds);
}

#[test]
fn reference_population_concentrations_stay_low() {
    let spec = ModelSpec::default();
    for seed in 0..20 {
        let ds = simulate_dataset(&StudyDesign::default(), &spec, &ParameterSet::reference(), seed).unwrap();
        let max = ds.subjects.iter().flat_map(|s| s.observations().filter_map(|r| r.dv)).fold(0.0, |a: f64, b| a.max(b));
        assert!(max < 2.0, "seed {seed}: max concentration {max}");
    }
}

#[test]
fn simulation_is_thread_count_invariant() {
    let spec = ModelSpec::default();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_dataset(&StudyDesign::default(), &spec, &ParameterSet::reference(), 42).unwrap())
    };
    assert_eq!(run(1).to_csv(), run(4).to_csv());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_csv_round_trip(
        n in 1usize..12,
        seed in any::<u64>(),
        lloq in prop_oneof![Just(0.0), Just(0.05), Just(0.2)],
        explicit in any::<bool>(),
    ) {
        let pool = poppk_core::simulator::reference_population();
        let covariates = if explicit {
            CovariateSource::Explicit(pool.iter().cycle().take(n).copied().collect())
        } else {
            CovariateSource::Resample(pool)
        };
        let design = StudyDesign { n_subjects: n, covariates, lloq, ..StudyDesign::default() };
        let ds = simulate_dataset(&design, &ModelSpec::default(), &ParameterSet::reference(), seed).unwrap();
        let back = parse_dataset(&ds.to_csv(), lloq).unwrap();
        prop_assert_eq!(back.n_usable_observations(), ds.n_usable_observations());
        prop_assert_eq!(back, ds);
    }
}
