//! Command implementations. Each validates its inputs before creating the
//! output directory, so usage errors leave nothing behind.

use std::collections::BTreeMap;
use std::path::PathBuf;

use poppk_core::dataset::{Sex, StudyDataset, VolumeGroup};
use poppk_core::diagnostics::{gof_csv, gof_table, Shrinkage};
use poppk_core::estimator::{
    covariate_search, fit_with, posthoc, trace_csv, FitOptions, FitResult, SearchOptions, SubjectEbe,
};
use poppk_core::model::{exposure_metrics, Eta, ExposureMetrics, IndividualParams, ModelSpec, ParamId, ParameterSet};
use poppk_core::simulator::simulate_dataset;
use poppk_core::stats::{compare_groups, report_csv, ReportRow};
use poppk_core::summary::quartiles;
use poppk_core::validation::{bootstrap, bootstrap_csv, vpc, vpc_csv, BootstrapOptions, BootstrapSummary};
use serde::Serialize;

use crate::artifacts::ArtifactWriter;
use crate::config::RunConfig;
use crate::error::CliError;

pub fn dispatch(command: &str, config: &RunConfig) -> Result<Vec<String>, CliError> {
    match command {
        "fit" => cmd_fit(config),
        "simulate" => cmd_simulate(config),
        "bootstrap" => cmd_bootstrap(config),
        "vpc" => cmd_vpc(config),
        "covariate-search" => cmd_covariate_search(config),
        "exposures" => cmd_exposures(config),
        "gof" => cmd_gof(config),
        "compare-groups" => cmd_compare_groups(config),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn output_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    config.output.clone().ok_or_else(|| CliError::Usage("no output directory (use --output or `output`)".into()))
}

fn require_seed(config: &RunConfig, command: &str) -> Result<u64, CliError> {
    config.seed.ok_or_else(|| CliError::Usage(format!("{command} is randomized and needs an explicit seed (--seed)")))
}

/// Parameters from the `parameters` file, checked against the model.
fn load_parameters(config: &RunConfig, spec: &ModelSpec) -> Result<Option<ParameterSet>, CliError> {
    let Some(path) = &config.parameters else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read parameters {}: {e}", path.display())))?;
    let params: ParameterSet = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid parameters {}: {e}", path.display())))?;
    spec.validate(&params).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Some(params))
}

/// Population estimates for post-processing commands: the `parameters` file
/// when given, otherwise a fresh fit that must converge.
fn final_estimates(config: &RunConfig, ds: &StudyDataset, spec: &ModelSpec) -> Result<ParameterSet, CliError> {
    if let Some(p) = load_parameters(config, spec)? {
        return Ok(p);
    }
    let init = config.initial_params(spec)?;
    let options = FitOptions { covariance: false, ..config.estimation };
    let fit = fit_with(ds, spec, &init, &options)?;
    if !fit.converged {
        return Err(CliError::Analysis(format!(
            "estimation did not converge (OFV {:.4}); supply `parameters` from a converged fit",
            fit.ofv
        )));
    }
    Ok(fit.params)
}

/// Roughly four significant digits, never in exponent notation.
fn sig(x: f64) -> String {
    if !x.is_finite() {
        return ".".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let decimals = (3 - x.abs().log10().floor() as i32).clamp(0, 8) as usize;
    format!("{x:.decimals$}")
}

fn shrinkage_text(s: Option<Shrinkage>) -> String {
    s.map_or_else(|| ".".into(), |s| format!("{:.1}", s.percent()))
}

fn ci_text(lo: f64, hi: f64) -> String {
    format!("[{} - {}]", sig(lo), sig(hi))
}

/// Parameter table in the published layout: estimate, RSE%, 95% CI and
/// shrinkage. Between-subject variability is reported as CV%; its RSE and
/// CI are transformed from the variance scale.
pub fn parameter_table(fit: &FitResult) -> String {
    let mut out = String::from("PARAMETER,ESTIMATE,RSE_PERCENT,CI95,SHRINKAGE_PERCENT\n");
    let spec = &fit.spec;
    let row = |out: &mut String, id: ParamId| {
        let Some(value) = id.get(&fit.params) else { return };
        let fixed = !fit.estimated.contains(&id);
        let (rse, ci) = match (fixed, fit.uncertainty_of(id)) {
            (true, _) => ("FIX".to_string(), ".".to_string()),
            (false, Some(u)) => (format!("{:.1}", u.rse_percent), ci_text(u.ci95.0, u.ci95.1)),
            (false, None) => (".".into(), ".".into()),
        };
        out.push_str(&format!("{},{},{},{},.\n", fit.param_name(id), sig(value), rse, ci));
    };
    for id in spec.theta_ids() {
        if id == ParamId::FLarge {
            out.push_str("F_SMALL,1,FIX,.,.\n");
        }
        row(&mut out, id);
    }
    for eta in Eta::ALL {
        let id = ParamId::Omega(eta);
        let var = fit.params.omega.variance(eta);
        if var <= 0.0 {
            continue;
        }
        let cv = fit.params.omega.cv_percent(eta);
        let fixed = !fit.estimated.contains(&id);
        let (rse, ci) = match (fixed, fit.uncertainty_of(id)) {
            (true, _) => ("FIX".to_string(), ".".to_string()),
            (false, Some(u)) => {
                let to_cv = |v: f64| 100.0 * v.max(0.0).sqrt();
                (format!("{:.1}", u.rse_percent / 2.0), ci_text(to_cv(u.ci95.0), to_cv(u.ci95.1)))
            }
            (false, None) => (".".into(), ".".into()),
        };
        out.push_str(&format!(
            "BSV_{}_CV_PERCENT,{},{},{},{}\n",
            eta.name(),
            sig(cv),
            rse,
            ci,
            shrinkage_text(fit.eta_shrinkage[eta.index()])
        ));
    }
    for id in spec.sigma_ids() {
        let Some(value) = id.get(&fit.params) else { continue };
        let (rse, ci) = match fit.uncertainty_of(id) {
            Some(u) => (format!("{:.1}", u.rse_percent), ci_text(u.ci95.0, u.ci95.1)),
            None if !fit.estimated.contains(&id) => ("FIX".into(), ".".into()),
            None => (".".into(), ".".into()),
        };
        out.push_str(&format!("{},{},{},{},{}\n", id, sig(value), rse, ci, shrinkage_text(fit.eps_shrinkage)));
    }
    out
}

fn ebe_csv(ebes: &[SubjectEbe]) -> String {
    let mut out = String::from("ID,ETA_CL,ETA_V,ETA_KA,CONVERGED\n");
    for e in ebes {
        out.push_str(&format!("{},{},{},{},{}\n", e.id, e.eta[0], e.eta[1], e.eta[2], u8::from(e.converged)));
    }
    out
}

#[derive(Serialize)]
struct FitReport<'a> {
    ofv: f64,
    converged: bool,
    iterations: usize,
    n_function_evals: usize,
    grad_norm: f64,
    estimated: &'a [ParamId],
    covariance_error: &'a Option<String>,
    flagged_subjects: Vec<u32>,
    eta_shrinkage_percent: BTreeMap<&'static str, Option<f64>>,
    eps_shrinkage_percent: Option<f64>,
}

fn fit_report(fit: &FitResult) -> FitReport<'_> {
    FitReport {
        ofv: fit.ofv,
        converged: fit.converged,
        iterations: fit.iterations,
        n_function_evals: fit.n_function_evals,
        grad_norm: fit.grad_norm,
        estimated: &fit.estimated,
        covariance_error: &fit.covariance_error,
        flagged_subjects: fit.flagged_subjects(),
        eta_shrinkage_percent: Eta::ALL
            .iter()
            .map(|e| (e.name(), fit.eta_shrinkage[e.index()].map(|s| s.percent())))
            .collect(),
        eps_shrinkage_percent: fit.eps_shrinkage.map(|s| s.percent()),
    }
}

fn fit_warnings(fit: &FitResult) -> Vec<String> {
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!("estimation did not converge (gradient norm {:.3e})", fit.grad_norm));
    }
    if let Some(e) = &fit.covariance_error {
        warnings.push(format!("covariance step: {e}"));
    }
    let flagged = fit.flagged_subjects();
    if !flagged.is_empty() {
        warnings.push(format!("EBE search did not converge for subjects {flagged:?}"));
    }
    warnings
}

fn cmd_fit(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let init = config.initial_params(&spec)?;
    let dir = output_dir(config)?;

    let fit = fit_with(&ds, &spec, &init, &config.estimation)?;
    let warnings = fit_warnings(&fit);

    let mut out = ArtifactWriter::create(&dir)?;
    out.write("parameters.csv", &parameter_table(&fit))?;
    out.write_json("parameters.json", &fit.params)?;
    out.write("ebes.csv", &ebe_csv(&fit.ebes))?;
    out.write_json("fit_report.json", &fit_report(&fit))?;
    let mut warnings = warnings;
    match gof_table(&ds, &fit) {
        Ok(rows) => out.write("gof.csv", &gof_csv(&rows))?,
        Err(e) => warnings.push(format!("GOF table not written: {e}")),
    }
    out.finish("fit", config, None, &warnings)?;
    if !fit.converged {
        return Err(CliError::Analysis(format!(
            "estimation did not converge (OFV {:.4}); partial artifacts written to {}",
            fit.ofv,
            dir.display()
        )));
    }
    Ok(warnings)
}

fn cmd_simulate(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let seed = require_seed(config, "simulate")?;
    let spec = config.model_spec()?;
    let params = match load_parameters(config, &spec)? {
        Some(p) => p,
        None => config.initial_params(&spec)?,
    };
    let pool = config.dataset.as_ref().map(|_| config.load_dataset()).transpose()?;
    let design = config.study_design(pool.as_ref());
    design.validate()?;
    let dir = output_dir(config)?;

    let ds = simulate_dataset(&design, &spec, &params, seed)?;
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("dataset.csv", &ds.to_csv())?;
    out.write_json("parameters.json", &params)?;
    out.finish("simulate", config, Some(seed), &[])?;
    Ok(Vec::new())
}

fn bootstrap_replicates_csv(summary: &BootstrapSummary) -> String {
    let mut out = String::from("REPLICATE,CONVERGED,OFV");
    for p in &summary.params {
        out.push(',');
        out.push_str(&p.name);
    }
    out.push_str(",NOTE\n");
    for r in &summary.replicates {
        out.push_str(&format!("{},{},{}", r.index, u8::from(r.converged), opt_num(r.ofv)));
        for k in 0..summary.params.len() {
            out.push(',');
            out.push_str(&opt_num(r.estimates.get(k).copied()));
        }
        out.push(',');
        out.push_str(&r.error.as_deref().unwrap_or("").replace(',', ";"));
        out.push('\n');
    }
    out
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(|| ".".into(), |v| v.to_string())
}

fn cmd_bootstrap(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let seed = require_seed(config, "bootstrap")?;
    let n = config.bootstrap.n;
    if n == 0 {
        return Err(CliError::Usage("bootstrap needs at least one replicate (bootstrap.n > 0)".into()));
    }
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let dir = output_dir(config)?;
    let params = final_estimates(config, &ds, &spec)?;

    let options = BootstrapOptions { fit: FitOptions { covariance: false, ..config.estimation } };
    let summary = bootstrap(&ds, &spec, &params, n, seed, &options)?;
    let mut warnings = Vec::new();
    if summary.warning {
        warnings.push(format!("{:.0}% of bootstrap replicates failed", 100.0 * summary.failure_rate));
    }
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("bootstrap.csv", &bootstrap_csv(&summary))?;
    out.write("bootstrap_replicates.csv", &bootstrap_replicates_csv(&summary))?;
    out.write_json("parameters.json", &params)?;
    out.finish("bootstrap", config, Some(seed), &warnings)?;
    if summary.warning {
        return Err(CliError::Analysis(warnings.remove(0)));
    }
    Ok(warnings)
}

fn cmd_vpc(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let seed = require_seed(config, "vpc")?;
    if config.vpc.n == 0 {
        return Err(CliError::Usage("VPC needs at least one simulation (vpc.n > 0)".into()));
    }
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let dir = output_dir(config)?;
    let params = final_estimates(config, &ds, &spec)?;

    let summary = vpc(&ds, &spec, &params, config.vpc.n, seed, config.vpc.binning)?;
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("vpc.csv", &vpc_csv(&summary))?;
    out.write_json("parameters.json", &params)?;
    out.finish("vpc", config, Some(seed), &[])?;
    Ok(Vec::new())
}

fn cmd_covariate_search(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let init = config.initial_params(&spec)?;
    let search = &config.covariate_search;
    if search.candidates.is_empty() {
        return Err(CliError::Usage("covariate_search.candidates is empty".into()));
    }
    let dir = output_dir(config)?;
    let options = SearchOptions {
        forward_threshold: search.forward_threshold,
        backward_threshold: search.backward_threshold,
        fit: FitOptions { covariance: false, ..config.estimation },
    };
    let result = covariate_search(&ds, &spec, &init, &search.candidates, &options)?;

    #[derive(Serialize)]
    struct Final<'a> {
        base_ofv: f64,
        final_ofv: f64,
        relationships: Vec<String>,
        model: &'a ModelSpec,
        parameters: &'a ParameterSet,
    }
    let fin = Final {
        base_ofv: result.base_ofv,
        final_ofv: result.final_fit.ofv,
        relationships: result.spec().covariates.iter().map(|e| e.to_string()).collect(),
        model: result.spec(),
        parameters: &result.final_fit.params,
    };
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("covariate_trace.csv", &trace_csv(&result.trace))?;
    out.write_json("covariate_model.json", &fin)?;
    out.finish("covariate-search", config, None, &[])?;
    Ok(Vec::new())
}

/// Individual parameters and exposures at the EBEs.
struct SubjectExposure {
    id: u32,
    dose: f64,
    individual: IndividualParams,
    metrics: ExposureMetrics,
}

fn subject_exposures(
    ds: &StudyDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    fu: f64,
) -> Result<(FitResult, Vec<SubjectExposure>), CliError> {
    let fit = posthoc(ds, spec, params)?;
    let rows = ds
        .subjects
        .iter()
        .zip(&fit.ebes)
        .map(|(s, e)| {
            let individual = spec.individual_params(&params.theta, &s.covariates, &e.eta)?;
            let dose = s.dose_amount();
            let metrics = exposure_metrics(&individual, dose, fu)?;
            Ok(SubjectExposure { id: s.id, dose, individual, metrics })
        })
        .collect::<poppk_core::Result<Vec<_>>>()?;
    Ok((fit, rows))
}

/// `median [Q1 - Q3]`, the layout of the published covariate table.
fn median_iqr(values: &[f64]) -> String {
    match quartiles(values) {
        Some(q) => format!("{} [{} - {}]", sig(q.median), sig(q.q1), sig(q.q3)),
        None => ".".into(),
    }
}

fn cmd_exposures(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let fu = config.exposures.unbound_fraction;
    if !(fu > 0.0 && fu <= 1.0) {
        return Err(CliError::Usage(format!("exposures.unbound_fraction must be in (0, 1], got {fu}")));
    }
    let dir = output_dir(config)?;
    let params = final_estimates(config, &ds, &spec)?;
    let (fit, rows) = subject_exposures(&ds, &spec, &params, fu)?;

    let mut table = String::from("ID,DOSE,CL,V,KA,F,AUC,CMAX,TMAX,CU_MAX\n");
    for r in &rows {
        let p = &r.individual;
        let m = &r.metrics;
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id, r.dose, p.cl, p.v, p.ka, p.f, m.auc, m.cmax, m.tmax, m.cu_max
        ));
    }
    let column = |f: fn(&SubjectExposure) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let mut summary = String::from("METRIC,UNIT,MEDIAN_IQR\n");
    for (name, unit, values) in [
        ("AUC", "mg.min/L", column(|r| r.metrics.auc)),
        ("CMAX", "mg/L", column(|r| r.metrics.cmax)),
        ("TMAX", "min", column(|r| r.metrics.tmax)),
        ("CU_MAX", "ug/L", column(|r| r.metrics.cu_max)),
    ] {
        summary.push_str(&format!("{name},{unit},{}\n", median_iqr(&values)));
    }
    let warnings: Vec<String> = fit
        .flagged_subjects()
        .first()
        .map(|_| format!("EBE search did not converge for subjects {:?}", fit.flagged_subjects()))
        .into_iter()
        .collect();
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("exposures.csv", &table)?;
    out.write("exposures_summary.csv", &summary)?;
    out.finish("exposures", config, None, &warnings)?;
    Ok(warnings)
}

fn cmd_gof(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let dir = output_dir(config)?;
    let params = final_estimates(config, &ds, &spec)?;
    let fit = posthoc(&ds, &spec, &params)?;
    let rows = gof_table(&ds, &fit)?;

    let mut shrink = String::from("QUANTITY,SHRINKAGE_PERCENT\n");
    for eta in Eta::ALL {
        shrink.push_str(&format!("ETA_{},{}\n", eta.name(), shrinkage_text(fit.eta_shrinkage[eta.index()])));
    }
    shrink.push_str(&format!("EPS,{}\n", shrinkage_text(fit.eps_shrinkage)));
    let warnings = fit_warnings(&fit);
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("gof.csv", &gof_csv(&rows))?;
    out.write("shrinkage.csv", &shrink)?;
    out.write("ebes.csv", &ebe_csv(&fit.ebes))?;
    out.finish("gof", config, None, &warnings)?;
    Ok(warnings)
}

/// Outcome labels keyed by subject id.
fn load_labels(config: &RunConfig) -> Result<BTreeMap<u32, bool>, CliError> {
    let path = config
        .compare_groups
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Usage("compare_groups.labels is not set".into()))?;
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read labels {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| CliError::Usage(format!("{}: missing column {name}", path.display())))
    };
    let (id_col, ok_col) = (col("ID")?, col("SUCCESS")?);
    let mut labels = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let bad = || CliError::Usage(format!("{}: row {}: expected integer ID and SUCCESS 0/1", path.display(), i + 2));
        let id: u32 = record.get(id_col).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let ok = match record.get(ok_col).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad()),
        };
        if labels.insert(id, ok).is_some() {
            return Err(CliError::Usage(format!("{}: duplicate ID {id}", path.display())));
        }
    }
    Ok(labels)
}

fn cmd_compare_groups(config: &RunConfig) -> Result<Vec<String>, CliError> {
    let ds = config.load_dataset()?;
    let spec = config.model_spec()?;
    let labels = load_labels(config)?;
    let success: Vec<bool> = ds
        .subjects
        .iter()
        .map(|s| labels.get(&s.id).copied().ok_or_else(|| CliError::Usage(format!("no outcome label for subject {}", s.id))))
        .collect::<Result<_, _>>()?;
    let dir = output_dir(config)?;
    let params = final_estimates(config, &ds, &spec)?;
    let (_, exposures) = subject_exposures(&ds, &spec, &params, config.exposures.unbound_fraction)?;

    let covs = || ds.subjects.iter().map(|s| s.covariates);
    let numeric: Vec<(String, Vec<f64>)> = vec![
        ("WT".into(), covs().map(|c| c.wt).collect()),
        ("AGE".into(), covs().map(|c| c.age).collect()),
        ("CL".into(), exposures.iter().map(|e| e.individual.cl).collect()),
        ("V".into(), exposures.iter().map(|e| e.individual.v).collect()),
        ("KA".into(), exposures.iter().map(|e| e.individual.ka).collect()),
        ("AUC".into(), exposures.iter().map(|e| e.metrics.auc).collect()),
        ("CMAX".into(), exposures.iter().map(|e| e.metrics.cmax).collect()),
        ("TMAX".into(), exposures.iter().map(|e| e.metrics.tmax).collect()),
        ("CU_MAX".into(), exposures.iter().map(|e| e.metrics.cu_max).collect()),
    ];
    let binary: Vec<(String, Vec<bool>)> = vec![
        ("SEX_FEMALE".into(), covs().map(|c| c.sex == Sex::Female).collect()),
        ("VOLGRP_HIGH".into(), covs().map(|c| c.volgrp == VolumeGroup::High).collect()),
    ];
    let mut rows: Vec<ReportRow> = compare_groups(&numeric, &binary, &success)?;
    // AAG is missing for some subjects: test it on the subjects that have it.
    let (aag, aag_success): (Vec<f64>, Vec<bool>) =
        covs().zip(&success).filter_map(|(c, s)| c.aag.map(|a| (a, *s))).unzip();
    if !aag.is_empty() {
        let mut extra = compare_groups(&[("AAG".into(), aag)], &[], &aag_success)?;
        for r in &mut extra {
            r.note = format!("{} (n={})", r.note, aag_success.len());
        }
        rows.extend(extra);
    }
    let mut out = ArtifactWriter::create(&dir)?;
    out.write("compare_groups.csv", &report_csv(&rows))?;
    out.finish("compare-groups", config, None, &[])?;
    Ok(Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig(0.15), "0.1500");
        assert_eq!(sig(14.0), "14.00");
        assert_eq!(sig(40.0), "40.00");
        assert_eq!(sig(1234.5), "1234");
        assert_eq!(sig(0.0), "0");
    }

    #[test]
    fn median_iqr_layout() {
        assert_eq!(median_iqr(&[12.0, 17.0, 22.0]), "17.00 [14.50 - 19.50]");
        assert_eq!(median_iqr(&[]), ".");
    }
}
