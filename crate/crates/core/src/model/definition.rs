use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::covariate::{CovariateEffect, PkParameter};
use super::params::{ErrorModel, Eta, IndividualParams, ParameterSet, Peripheral, ThetaVector};
use crate::dataset::{Covariates, VolumeGroup};
use crate::error::{Error, Result};

/// Reference body weight for the allometric clearance term, kg.
pub const REFERENCE_WEIGHT: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StructuralModel {
    #[default]
    OneCompartmentFirstOrder,
    /// Zero-order input into the central compartment over `d1` minutes.
    OneCompartmentZeroOrder,
    TwoCompartmentFirstOrder,
}

/// Identifies a scalar model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    ClF,
    VF,
    Ka,
    WtExp,
    FLarge,
    Q,
    V2,
    D1,
    /// Coefficient of the i-th entry of the covariate map.
    Covariate(usize),
    Omega(Eta),
    SigmaProp,
    SigmaAdd,
}

impl ParamId {
    /// Parse the names used in configuration files, e.g. `CL_F`, `OMEGA_KA`, `COV1`.
    pub fn parse(s: &str) -> Option<ParamId> {
        let s = s.trim().to_ascii_uppercase();
        Some(match s.as_str() {
            "CL_F" => ParamId::ClF,
            "V_F" => ParamId::VF,
            "KA" => ParamId::Ka,
            "WT_EXP" => ParamId::WtExp,
            "F_LARGE" => ParamId::FLarge,
            "Q" => ParamId::Q,
            "V2" => ParamId::V2,
            "D1" => ParamId::D1,
            "OMEGA_CL" => ParamId::Omega(Eta::Cl),
            "OMEGA_V" => ParamId::Omega(Eta::V),
            "OMEGA_KA" => ParamId::Omega(Eta::Ka),
            "SIGMA_PROP" => ParamId::SigmaProp,
            "SIGMA_ADD" => ParamId::SigmaAdd,
            other => {
                let i: usize = other.strip_prefix("COV")?.parse().ok()?;
                ParamId::Covariate(i.checked_sub(1)?)
            }
        })
    }

    /// Whether the natural scale is strictly positive (estimated on the log scale).
    pub fn is_positive(self) -> bool {
        !matches!(self, ParamId::WtExp | ParamId::Covariate(_))
    }

    pub fn get(self, p: &ParameterSet) -> Option<f64> {
        let t = &p.theta;
        match self {
            ParamId::ClF => Some(t.cl_f),
            ParamId::VF => Some(t.v_f),
            ParamId::Ka => Some(t.ka),
            ParamId::WtExp => Some(t.wt_exp),
            ParamId::FLarge => Some(t.f_large),
            ParamId::Q => t.q,
            ParamId::V2 => t.v2,
            ParamId::D1 => t.d1,
            ParamId::Covariate(i) => t.covariate_effects.get(i).copied(),
            ParamId::Omega(e) => Some(p.omega.variance(e)),
            ParamId::SigmaProp => Some(p.sigma.sigma_prop),
            ParamId::SigmaAdd => Some(p.sigma.sigma_add),
        }
    }

    pub fn set(self, p: &mut ParameterSet, value: f64) {
        let t = &mut p.theta;
        match self {
            ParamId::ClF => t.cl_f = value,
            ParamId::VF => t.v_f = value,
            ParamId::Ka => t.ka = value,
            ParamId::WtExp => t.wt_exp = value,
            ParamId::FLarge => t.f_large = value,
            ParamId::Q => t.q = Some(value),
            ParamId::V2 => t.v2 = Some(value),
            ParamId::D1 => t.d1 = Some(value),
            ParamId::Covariate(i) => t.covariate_effects[i] = value,
            ParamId::Omega(e) => p.omega.variances[e.index()] = value,
            ParamId::SigmaProp => p.sigma.sigma_prop = value,
            ParamId::SigmaAdd => p.sigma.sigma_add = value,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::ClF => f.write_str("CL_F"),
            ParamId::VF => f.write_str("V_F"),
            ParamId::Ka => f.write_str("KA"),
            ParamId::WtExp => f.write_str("WT_EXP"),
            ParamId::FLarge => f.write_str("F_LARGE"),
            ParamId::Q => f.write_str("Q"),
            ParamId::V2 => f.write_str("V2"),
            ParamId::D1 => f.write_str("D1"),
            ParamId::Covariate(i) => write!(f, "COV{}", i + 1),
            ParamId::Omega(e) => write!(f, "OMEGA_{}", e.name()),
            ParamId::SigmaProp => f.write_str("SIGMA_PROP"),
            ParamId::SigmaAdd => f.write_str("SIGMA_ADD"),
        }
    }
}

impl Serialize for ParamId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ParamId::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown parameter \"{s}\"")))
    }
}

/// Structural model, error model, covariate map and fixed-parameter flags.
///
/// The low-volume group's bioavailability is the reference (1, not a
/// parameter); `F_LARGE` is the high-volume group's relative value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub structural: StructuralModel,
    pub error_model: ErrorModel,
    #[serde(default)]
    pub covariates: Vec<CovariateEffect>,
    #[serde(default = "default_reference_weight")]
    pub reference_weight: f64,
    #[serde(default)]
    pub fixed: BTreeSet<ParamId>,
}

fn default_reference_weight() -> f64 {
    REFERENCE_WEIGHT
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            structural: StructuralModel::OneCompartmentFirstOrder,
            error_model: ErrorModel::Proportional,
            covariates: Vec::new(),
            reference_weight: REFERENCE_WEIGHT,
            fixed: BTreeSet::new(),
        }
    }
}

impl ModelSpec {
    /// The base model for covariate search: no weight effect on clearance.
    pub fn without_weight_effect() -> Self {
        let mut spec = ModelSpec::default();
        spec.fixed.insert(ParamId::WtExp);
        spec
    }

    pub fn is_fixed(&self, id: ParamId) -> bool {
        self.fixed.contains(&id)
    }

    /// Fixed-effect parameters that exist for this structural model.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::ClF, ParamId::VF];
        match self.structural {
            StructuralModel::OneCompartmentFirstOrder => ids.push(ParamId::Ka),
            StructuralModel::OneCompartmentZeroOrder => ids.push(ParamId::D1),
            StructuralModel::TwoCompartmentFirstOrder => ids.extend([ParamId::Ka, ParamId::Q, ParamId::V2]),
        }
        ids.extend([ParamId::WtExp, ParamId::FLarge]);
        ids.extend((0..self.covariates.len()).map(ParamId::Covariate));
        ids
    }

    /// Residual error parameters that exist for this error model.
    pub fn sigma_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.error_model.uses_proportional() {
            ids.push(ParamId::SigmaProp);
        }
        if self.error_model.uses_additive() {
            ids.push(ParamId::SigmaAdd);
        }
        ids
    }

    /// Etas with positive variance; zero-variance etas are switched off.
    pub fn active_etas(&self, params: &ParameterSet) -> Vec<Eta> {
        Eta::ALL.into_iter().filter(|e| params.omega.variance(*e) > 0.0).collect()
    }

    /// All parameters that are estimated, in a fixed order.
    pub fn estimated_ids(&self, params: &ParameterSet) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.theta_ids();
        ids.extend(self.active_etas(params).into_iter().map(ParamId::Omega));
        ids.extend(self.sigma_ids());
        ids.retain(|id| !self.is_fixed(*id));
        ids
    }

    pub fn with_effect(&self, effect: CovariateEffect) -> ModelSpec {
        let mut spec = self.clone();
        spec.covariates.push(effect);
        spec
    }

    /// Remove the i-th covariate relationship, renumbering fixed flags.
    pub fn without_effect(&self, index: usize) -> ModelSpec {
        let mut spec = self.clone();
        spec.covariates.remove(index);
        spec.fixed = self
            .fixed
            .iter()
            .filter_map(|id| match *id {
                ParamId::Covariate(i) if i == index => None,
                ParamId::Covariate(i) if i > index => Some(ParamId::Covariate(i - 1)),
                other => Some(other),
            })
            .collect();
        spec
    }

    pub fn validate(&self, params: &ParameterSet) -> Result<()> {
        params.validate()?;
        if !(self.reference_weight > 0.0) {
            return Err(Error::Domain("reference weight must be positive".into()));
        }
        if params.sigma.model != self.error_model {
            return Err(Error::Domain(format!(
                "sigma parameters are {:?} but the model uses {:?} error",
                params.sigma.model, self.error_model
            )));
        }
        if params.theta.covariate_effects.len() != self.covariates.len() {
            return Err(Error::Domain(format!(
                "{} covariate coefficients for {} covariate relationships",
                params.theta.covariate_effects.len(),
                self.covariates.len()
            )));
        }
        for effect in &self.covariates {
            effect.validate()?;
        }
        let t = &params.theta;
        match self.structural {
            StructuralModel::OneCompartmentFirstOrder => {}
            StructuralModel::OneCompartmentZeroOrder => {
                if t.d1.is_none() {
                    return Err(Error::Domain("zero-order absorption needs D1".into()));
                }
            }
            StructuralModel::TwoCompartmentFirstOrder => {
                if t.q.is_none() || t.v2.is_none() {
                    return Err(Error::Domain("two-compartment model needs Q and V2".into()));
                }
            }
        }
        if self.structural != StructuralModel::OneCompartmentFirstOrder && !self.covariates.is_empty() {
            return Err(Error::Domain(
                "covariate relationships are supported only for the one-compartment first-order model".into(),
            ));
        }
        Ok(())
    }

    /// Individual parameters for a subject. `eta` is indexed by [`Eta`].
    pub fn individual_params(
        &self,
        theta: &ThetaVector,
        cov: &Covariates,
        eta: &[f64; 3],
    ) -> Result<IndividualParams> {
        if !(cov.wt > 0.0) {
            return Err(Error::Domain(format!("weight must be positive, got {}", cov.wt)));
        }
        let mut factors = [1.0f64; 3];
        for (effect, coef) in self.covariates.iter().zip(&theta.covariate_effects) {
            let k = match effect.parameter {
                PkParameter::Cl => 0,
                PkParameter::V => 1,
                PkParameter::Ka => 2,
            };
            factors[k] *= effect.factor(*coef, cov)?;
        }
        let cl = theta.cl_f
            * (cov.wt / self.reference_weight).powf(theta.wt_exp)
            * factors[0]
            * eta[Eta::Cl.index()].exp();
        let v = theta.v_f * factors[1] * eta[Eta::V.index()].exp();
        let absorption = factors[2] * eta[Eta::Ka.index()].exp();
        let f = match cov.volgrp {
            VolumeGroup::Low => 1.0,
            VolumeGroup::High => theta.f_large,
        };
        let mut p = IndividualParams::one_compartment(cl, v, theta.ka, f);
        match self.structural {
            StructuralModel::OneCompartmentFirstOrder => p.ka = theta.ka * absorption,
            StructuralModel::OneCompartmentZeroOrder => {
                p.zero_order_duration = theta.d1.map(|d| d * absorption);
            }
            StructuralModel::TwoCompartmentFirstOrder => {
                p.ka = theta.ka * absorption;
                p.peripheral = theta.q.zip(theta.v2).map(|(q, v2)| Peripheral { q, v2 });
            }
        }
        if [p.cl, p.v, p.ka, p.f].iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Evaluation(format!("non-finite individual parameters {p:?}")));
        }
        Ok(p)
    }
}

/// Individual parameters under the final one-compartment model.
pub fn individual_params(theta: &ThetaVector, cov: &Covariates, eta: &[f64; 3]) -> Result<IndividualParams> {
    ModelSpec::default().individual_params(theta, cov, eta)
}
