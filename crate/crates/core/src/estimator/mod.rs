//! Population estimation by first-order conditional estimation with
//! interaction (FOCE-I), standard errors, and stepwise covariate search.

pub mod covsearch;
pub mod foce;
pub mod optimize;
mod fit;

pub use covsearch::{covariate_search, trace_csv, SearchOptions, SearchResult, TraceEntry};
pub use fit::{
    covariance_report, fit, fit_with, foce_ofv, param_name, posthoc, standard_errors, FitOptions, FitResult,
    FoceEvaluation, ParamLayout, ParameterUncertainty, PkSubject, SubjectEbe, HESSIAN_STEP,
};
pub use foce::{estimate_ebe, inner_objective, linearize, subject_ofv, IndividualModel, LinearGaussianSubject};
pub use optimize::{minimize_bfgs, numerical_hessian, OptimizerSettings};
