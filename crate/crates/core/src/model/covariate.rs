use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Covariates;
use crate::error::{Error, Result};

/// Individual parameter a covariate acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PkParameter {
    Cl,
    V,
    Ka,
}

impl PkParameter {
    pub fn name(self) -> &'static str {
        match self {
            PkParameter::Cl => "CL",
            PkParameter::V => "V",
            PkParameter::Ka => "KA",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CovariateName {
    Wt,
    Age,
    Sex,
    Volgrp,
    Aag,
}

impl CovariateName {
    pub const ALL: [CovariateName; 5] = [
        CovariateName::Wt,
        CovariateName::Age,
        CovariateName::Sex,
        CovariateName::Volgrp,
        CovariateName::Aag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovariateName::Wt => "WT",
            CovariateName::Age => "AGE",
            CovariateName::Sex => "SEX",
            CovariateName::Volgrp => "VOLGRP",
            CovariateName::Aag => "AAG",
        }
    }

    pub fn is_categorical(self) -> bool {
        matches!(self, CovariateName::Sex | CovariateName::Volgrp)
    }

    /// Value for a subject; categorical covariates are their 0/1 codes.
    pub fn value(self, c: &Covariates) -> Option<f64> {
        match self {
            CovariateName::Wt => Some(c.wt),
            CovariateName::Age => Some(c.age),
            CovariateName::Sex => Some(f64::from(c.sex.code())),
            CovariateName::Volgrp => Some(f64::from(c.volgrp.code())),
            CovariateName::Aag => c.aag,
        }
    }

    /// Functional forms worth testing. On a 0/1 covariate every form
    /// describes the same two-level model, and the power form is undefined
    /// at zero, so only linear and exponential are offered.
    pub fn forms(self) -> &'static [CovariateForm] {
        if self.is_categorical() {
            &[CovariateForm::Linear, CovariateForm::Exponential]
        } else {
            &[CovariateForm::Linear, CovariateForm::Power, CovariateForm::Exponential]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateForm {
    /// `1 + θ·(x − ref)`
    Linear,
    /// `(x / ref)^θ`
    Power,
    /// `exp(θ·(x − ref))`
    Exponential,
}

impl CovariateForm {
    pub fn name(self) -> &'static str {
        match self {
            CovariateForm::Linear => "linear",
            CovariateForm::Power => "power",
            CovariateForm::Exponential => "exponential",
        }
    }
}

/// One parameter–covariate relationship with its reference value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffect {
    pub parameter: PkParameter,
    pub covariate: CovariateName,
    pub form: CovariateForm,
    pub reference: f64,
}

impl fmt::Display for CovariateEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.parameter.name(), self.covariate.name(), self.form.name().to_uppercase())
    }
}

impl CovariateEffect {
    pub fn validate(&self) -> Result<()> {
        if !self.reference.is_finite() {
            return Err(Error::Domain(format!("{self}: non-finite reference")));
        }
        if self.form == CovariateForm::Power {
            if self.covariate.is_categorical() {
                return Err(Error::Domain(format!("{self}: power form needs a continuous covariate")));
            }
            if self.reference <= 0.0 {
                return Err(Error::Domain(format!("{self}: power form needs a positive reference")));
            }
        }
        Ok(())
    }

    /// Multiplicative factor on the typical parameter. A subject missing the
    /// covariate is assigned the reference value (factor 1).
    pub fn factor(&self, coefficient: f64, cov: &Covariates) -> Result<f64> {
        let Some(x) = self.covariate.value(cov) else {
            return Ok(1.0);
        };
        let factor = match self.form {
            CovariateForm::Linear => 1.0 + coefficient * (x - self.reference),
            CovariateForm::Power => (x / self.reference).powf(coefficient),
            CovariateForm::Exponential => (coefficient * (x - self.reference)).exp(),
        };
        if factor > 0.0 && factor.is_finite() {
            Ok(factor)
        } else {
            Err(Error::Evaluation(format!("{self}: non-positive covariate factor {factor}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sex, VolumeGroup};

    fn cov(wt: f64) -> Covariates {
        Covariates { wt, age: 40.0, sex: Sex::Female, volgrp: VolumeGroup::Low, aag: None }
    }

    #[test]
    fn forms_evaluate() {
        let eff = |form| CovariateEffect {
            parameter: PkParameter::Cl,
            covariate: CovariateName::Wt,
            form,
            reference: 15.0,
        };
        assert!((eff(CovariateForm::Power).factor(0.87, &cov(12.0)).unwrap() - 0.8f64.powf(0.87)).abs() < 1e-15);
        assert!((eff(CovariateForm::Linear).factor(0.1, &cov(12.0)).unwrap() - 0.7).abs() < 1e-15);
        assert!((eff(CovariateForm::Exponential).factor(0.1, &cov(15.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(eff(CovariateForm::Linear).factor(1.0, &cov(12.0)).is_err());
    }

    #[test]
    fn missing_covariate_is_neutral() {
        let e = CovariateEffect {
            parameter: PkParameter::Cl,
            covariate: CovariateName::Aag,
            form: CovariateForm::Power,
            reference: 0.65,
        };
        assert_eq!(e.factor(3.0, &cov(15.0)).unwrap(), 1.0);
    }

    #[test]
    fn power_on_categorical_rejected() {
        let e = CovariateEffect {
            parameter: PkParameter::V,
            covariate: CovariateName::Sex,
            form: CovariateForm::Power,
            reference: 1.0,
        };
        assert!(e.validate().is_err());
        assert_eq!(CovariateName::Sex.forms().len(), 2);
    }
}
