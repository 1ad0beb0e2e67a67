//! Population pharmacokinetics engine for single-dose depot absorption.
//!
//! The crate fits nonlinear mixed-effects models with log-normal
//! between-subject variability by first-order conditional estimation with
//! interaction (FOCE-I), selects covariates by forward inclusion and backward
//! elimination on the objective function, and evaluates fits with
//! goodness-of-fit residuals, a nonparametric subject bootstrap and visual
//! predictive checks. It also simulates study datasets and computes
//! per-subject exposure metrics.
//!
//! Units throughout: time in minutes, amounts in mg, concentrations in mg/L,
//! clearance in L/min, volumes in L.

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod summary;
pub mod validation;

pub use error::{Error, Result};
