//! Command-line behaviour: exit codes, artifact layout and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").canonicalize().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn poppk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poppk")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

/// Fitted parameters of the bundled study, shared by the tests that need them.
fn fitted_parameters() -> &'static Path {
    static FIT: OnceLock<PathBuf> = OnceLock::new();
    FIT.get_or_init(|| {
        let out = scratch("shared_fit");
        let config = data_dir().join("analysis.toml");
        let o = poppk(&["fit", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    })
}

fn analysis_config(dir: &Path, extra: &str) -> PathBuf {
    let data = data_dir();
    let body = format!(
        "dataset = \"{}\"\nparameters = \"{}\"\nseed = 7\n{extra}\n[compare_groups]\nlabels = \"{}\"\n",
        data.join("synthetic_study.csv").display(),
        fitted_parameters().join("parameters.json").display(),
        data.join("outcomes.csv").display(),
    );
    write_config(dir, &body)
}

#[test]
fn fit_writes_parameter_table() {
    let dir = fitted_parameters();
    let table = fs::read_to_string(dir.join("parameters.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "PARAMETER,ESTIMATE,RSE_PERCENT,CI95,SHRINKAGE_PERCENT");
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for expected in ["CL_F", "V_F", "KA", "WT_EXP", "F_SMALL", "F_LARGE", "BSV_CL_CV_PERCENT", "SIGMA_PROP"] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    for file in ["parameters.json", "ebes.csv", "fit_report.json", "gof.csv", "manifest.json"] {
        assert!(dir.join(file).exists(), "missing {file}");
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = scratch("missing_dataset");
    let out = dir.join("out");
    let config = write_config(&dir, "dataset = \"does_not_exist.csv\"\n");
    let o = poppk(&["fit", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does_not_exist.csv"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = scratch("unknown_key");
    let config = write_config(&dir, "datset = \"x.csv\"\n");
    let o = poppk(&["fit", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bootstrap_without_replicates_is_rejected() {
    let dir = scratch("bootstrap_zero");
    let out = dir.join("out");
    let config = analysis_config(&dir, "[bootstrap]\nn = 0\n");
    let o = poppk(&["bootstrap", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn randomized_commands_require_a_seed() {
    let dir = scratch("no_seed");
    let out = dir.join("out");
    let config = write_config(&dir, &format!("dataset = \"{}\"\n", data_dir().join("synthetic_study.csv").display()));
    let o = poppk(&["vpc", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn vpc_uses_eight_bins_and_reruns_identically() {
    let dir = scratch("vpc");
    let config = analysis_config(&dir, "[vpc]\nn = 200\n");
    let run = |name: &str, threads: &str| {
        let out = dir.join(name);
        let o = poppk(&[
            "vpc", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap(), "--threads", threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a", "1"), run("b", "3"));
    let vpc = fs::read_to_string(a.join("vpc.csv")).unwrap();
    assert_eq!(vpc.lines().count(), 1 + 8);
    for file in ["vpc.csv", "parameters.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn exposure_summary_layout() {
    let dir = scratch("exposures");
    let out = dir.join("out");
    let config = analysis_config(&dir, "");
    let o = poppk(&["exposures", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("exposures_summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "METRIC,UNIT,MEDIAN_IQR");
    for line in lines {
        let cell = line.rsplit(',').next().unwrap();
        let (median, rest) = cell.split_once(" [").unwrap_or_else(|| panic!("bad cell {cell}"));
        let (q1, q3) = rest.strip_suffix(']').unwrap().split_once(" - ").unwrap();
        let [m, lo, hi] = [median, q1, q3].map(|s| s.parse::<f64>().unwrap());
        assert!(lo <= m && m <= hi, "{line}");
    }
    let table = fs::read_to_string(out.join("exposures.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "ID,DOSE,CL,V,KA,F,AUC,CMAX,TMAX,CU_MAX");
    assert_eq!(table.lines().count(), 41);
}

#[test]
fn compare_groups_reports_every_variable() {
    let dir = scratch("compare");
    let out = dir.join("out");
    let config = analysis_config(&dir, "");
    let o = poppk(&["compare-groups", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("compare_groups.csv")).unwrap();
    for variable in ["WT", "AGE", "AAG", "CL", "AUC", "CU_MAX", "SEX_FEMALE", "VOLGRP_HIGH"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{variable},"))), "missing {variable}");
    }
}

#[test]
fn bootstrap_artifacts_do_not_depend_on_output_dir_or_threads() {
    let dir = scratch("bootstrap");
    let config = analysis_config(&dir, "[bootstrap]\nn = 3\n");
    let run = |name: &str, threads: &str| {
        let out = dir.join(name);
        let o = poppk(&[
            "bootstrap", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap(), "--threads", threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a", "1"), run("b", "2"));
    for file in ["bootstrap.csv", "bootstrap_replicates.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "bootstrap");
}
