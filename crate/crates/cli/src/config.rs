//! Run configuration: a single TOML file, resolved into core types.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use poppk_core::dataset::{StudyDataset, DEFAULT_LLOQ};
use poppk_core::estimator::FitOptions;
use poppk_core::model::{
    CovariateEffect, CovariateName, ErrorModel, ModelSpec, OmegaMatrix, ParamId, ParameterSet, PkParameter,
    SigmaParams, StructuralModel, ThetaVector, DEFAULT_UNBOUND_FRACTION, REFERENCE_WEIGHT,
};
use poppk_core::simulator::{CovariateSource, StudyDesign, DEFAULT_DOSE_PER_KG, DEFAULT_TIMES};
use poppk_core::validation::Binning;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset CSV.
    pub dataset: Option<PathBuf>,
    /// LLOQ applied on load, mg/L.
    pub lloq: Option<f64>,
    /// Output directory (overridden by `--output`).
    pub output: Option<PathBuf>,
    /// Seed for randomized commands (overridden by `--seed`).
    pub seed: Option<u64>,
    /// Parameter file written by a previous `fit` (`parameters.json`).
    /// When set, commands that need estimates use it instead of fitting.
    pub parameters: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    /// Initial estimates by parameter name (`CL_F`, `OMEGA_KA`, `COV1`, ...).
    /// Omega entries are variances. Unlisted parameters take defaults.
    #[serde(default)]
    pub initial: BTreeMap<String, f64>,
    #[serde(default)]
    pub estimation: FitOptions,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub vpc: VpcConfig,
    #[serde(default)]
    pub covariate_search: SearchConfig,
    #[serde(default)]
    pub exposures: ExposureConfig,
    #[serde(default)]
    pub compare_groups: CompareConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub structural: StructuralModel,
    pub error_model: ErrorModel,
    pub reference_weight: f64,
    pub covariates: Vec<CovariateEffect>,
    /// Parameter names held at their initial values.
    pub fixed: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            structural: StructuralModel::OneCompartmentFirstOrder,
            error_model: ErrorModel::Proportional,
            reference_weight: REFERENCE_WEIGHT,
            covariates: Vec::new(),
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    /// Resample the dataset's subjects (the reference population without a dataset).
    #[default]
    Resample,
    /// Use the dataset's subjects in order.
    Explicit,
    /// Resample the built-in 40-subject reference population.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_subjects: usize,
    pub times: Vec<f64>,
    pub dose_per_kg: f64,
    pub covariates: CovariateMode,
    /// Negative to keep the source's volume groups.
    pub fraction_high_volume: f64,
    pub lloq: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_subjects: 40,
            times: DEFAULT_TIMES.to_vec(),
            dose_per_kg: DEFAULT_DOSE_PER_KG,
            covariates: CovariateMode::Resample,
            fraction_high_volume: 0.5,
            lloq: DEFAULT_LLOQ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { n: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpcConfig {
    pub n: usize,
    pub binning: Binning,
}

impl Default for VpcConfig {
    fn default() -> Self {
        VpcConfig { n: 1000, binning: Binning::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// `[parameter, covariate]` pairs, e.g. `["CL", "WT"]`.
    pub candidates: Vec<(PkParameter, CovariateName)>,
    pub forward_threshold: f64,
    pub backward_threshold: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let pairs = [
            (PkParameter::Cl, CovariateName::Wt),
            (PkParameter::Cl, CovariateName::Age),
            (PkParameter::Cl, CovariateName::Aag),
            (PkParameter::V, CovariateName::Wt),
            (PkParameter::Ka, CovariateName::Volgrp),
        ];
        SearchConfig { candidates: pairs.to_vec(), forward_threshold: 3.84, backward_threshold: 3.84 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExposureConfig {
    pub unbound_fraction: f64,
}

impl Default for ExposureConfig {
    fn default() -> Self {
        ExposureConfig { unbound_fraction: DEFAULT_UNBOUND_FRACTION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// CSV with columns `ID,SUCCESS` (1 = successful block, 0 = failed).
    pub labels: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut config.dataset);
        resolve(&mut config.output);
        resolve(&mut config.parameters);
        resolve(&mut config.compare_groups.labels);
        Ok(config)
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let fixed = m
            .fixed
            .iter()
            .map(|name| ParamId::parse(name).ok_or_else(|| CliError::Usage(format!("unknown fixed parameter \"{name}\""))))
            .collect::<Result<_, _>>()?;
        Ok(ModelSpec {
            structural: m.structural,
            error_model: m.error_model,
            covariates: m.covariates.clone(),
            reference_weight: m.reference_weight,
            fixed,
        })
    }

    /// Initial estimates: published values, overridden by `[initial]`.
    pub fn initial_params(&self, spec: &ModelSpec) -> Result<ParameterSet, CliError> {
        let mut theta = ThetaVector::reference();
        match spec.structural {
            StructuralModel::OneCompartmentFirstOrder => {}
            StructuralModel::OneCompartmentZeroOrder => theta.d1 = Some(10.0),
            StructuralModel::TwoCompartmentFirstOrder => {
                theta.q = Some(0.05);
                theta.v2 = Some(10.0);
            }
        }
        theta.covariate_effects = vec![0.0; spec.covariates.len()];
        let sigma = match spec.error_model {
            ErrorModel::Proportional => SigmaParams::proportional(0.14),
            ErrorModel::Additive => SigmaParams::additive(0.02),
            ErrorModel::Combined => SigmaParams::combined(0.01, 0.14),
        };
        let mut params = ParameterSet { theta, omega: OmegaMatrix::from_cv_percent(41.0, 47.0, 81.0), sigma };
        for (name, value) in &self.initial {
            let id = ParamId::parse(name).ok_or_else(|| CliError::Usage(format!("unknown parameter \"{name}\"")))?;
            if id.get(&params).is_none() {
                return Err(CliError::Usage(format!("parameter {name} does not exist in this model")));
            }
            id.set(&mut params, *value);
        }
        spec.validate(&params).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(params)
    }

    pub fn load_dataset(&self) -> Result<StudyDataset, CliError> {
        let path = self.dataset.as_ref().ok_or_else(|| CliError::Usage("config does not name a dataset".into()))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", path.display())))?;
        poppk_core::dataset::parse_dataset(&text, self.lloq.unwrap_or(DEFAULT_LLOQ))
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn study_design(&self, dataset: Option<&StudyDataset>) -> StudyDesign {
        let s = &self.simulation;
        let from_dataset = || dataset.map(|d| d.subjects.iter().map(|s| s.covariates).collect::<Vec<_>>());
        let covariates = match (s.covariates, from_dataset()) {
            (CovariateMode::Explicit, Some(list)) => CovariateSource::Explicit(list),
            (CovariateMode::Resample, Some(pool)) => CovariateSource::Resample(pool),
            _ => CovariateSource::Resample(poppk_core::simulator::reference_population()),
        };
        StudyDesign {
            n_subjects: s.n_subjects,
            times: s.times.clone(),
            dose_per_kg: s.dose_per_kg,
            covariates,
            fraction_high_volume: (s.fraction_high_volume >= 0.0).then_some(s.fraction_high_volume),
            lloq: s.lloq,
        }
    }
}
