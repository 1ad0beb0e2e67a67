//! One-compartment first-order absorption model with log-normal
//! between-subject variability, covariate relationships, residual error
//! models and closed-form exposure metrics.

mod covariate;
mod definition;
mod params;
mod pk;

pub use covariate::{CovariateEffect, CovariateForm, CovariateName, PkParameter};
pub use definition::{individual_params, ModelSpec, ParamId, StructuralModel, REFERENCE_WEIGHT};
pub use params::{
    ErrorModel, Eta, IndividualParams, OmegaMatrix, ParameterSet, Peripheral, SigmaParams, ThetaVector,
};
pub use pk::{
    concentration, error_sd, exposure_metrics, tmax_first_order, unbound_cmax, ExposureMetrics,
    DEFAULT_UNBOUND_FRACTION, DEGENERATE_RATE_GAP, RESIDUAL_SD_FLOOR,
};
