//! Model validation by nonparametric subject bootstrap and visual
//! predictive check.

mod bootstrap;
mod vpc;

pub use bootstrap::{
    bootstrap, bootstrap_csv, resample_subjects, BootstrapOptions, BootstrapParam, BootstrapSummary, Replicate,
    FAILURE_WARNING_RATE,
};
pub use vpc::{vpc, vpc_csv, Binning, VpcBin, VpcSummary, VPC_MIN_OBSERVATIONS};

/// Format an optional value for CSV output, "." when missing.
pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| ".".to_string(), |x| x.to_string())
}
