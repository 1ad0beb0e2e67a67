use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random effects carried by the model, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Eta {
    Cl,
    V,
    /// Absorption: `ka` for first-order input, the input duration for zero-order input.
    Ka,
}

impl Eta {
    pub const ALL: [Eta; 3] = [Eta::Cl, Eta::V, Eta::Ka];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Eta::Cl => "CL",
            Eta::V => "V",
            Eta::Ka => "KA",
        }
    }
}

/// Fixed effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    /// Typical apparent clearance CL/F at the reference weight, L/min.
    pub cl_f: f64,
    /// Typical apparent central volume V/F, L.
    pub v_f: f64,
    /// First-order absorption rate constant, 1/min.
    pub ka: f64,
    /// Exponent of (WT / reference weight) on CL/F.
    pub wt_exp: f64,
    /// Relative bioavailability of the high-volume group (low volume is 1).
    pub f_large: f64,
    /// Intercompartmental clearance, L/min (two-compartment disposition only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Peripheral volume, L (two-compartment disposition only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v2: Option<f64>,
    /// Zero-order input duration, min (zero-order absorption only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<f64>,
    /// Coefficients of the model's covariate map, in map order.
    #[serde(default)]
    pub covariate_effects: Vec<f64>,
}

impl ThetaVector {
    /// Final published estimates of the one-compartment model.
    pub fn reference() -> Self {
        ThetaVector {
            cl_f: 0.15,
            v_f: 14.0,
            ka: 0.18,
            wt_exp: 0.87,
            f_large: 0.88,
            q: None,
            v2: None,
            d1: None,
            covariate_effects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("CL_F", Some(self.cl_f)),
            ("V_F", Some(self.v_f)),
            ("KA", Some(self.ka)),
            ("F_LARGE", Some(self.f_large)),
            ("Q", self.q),
            ("V2", self.v2),
            ("D1", self.d1),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Domain(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if !self.wt_exp.is_finite() || self.covariate_effects.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("non-finite covariate coefficient".into()));
        }
        Ok(())
    }
}

/// Diagonal between-subject variance matrix, indexed by [`Eta`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaMatrix {
    /// Variances of (eta_CL, eta_V, eta_KA).
    pub variances: [f64; 3],
}

impl OmegaMatrix {
    pub fn zero() -> Self {
        OmegaMatrix { variances: [0.0; 3] }
    }

    /// Build from CV% using CV = 100·sqrt(ω²).
    pub fn from_cv_percent(cl: f64, v: f64, ka: f64) -> Self {
        let var = |cv: f64| (cv / 100.0) * (cv / 100.0);
        OmegaMatrix { variances: [var(cl), var(v), var(ka)] }
    }

    pub fn variance(&self, eta: Eta) -> f64 {
        self.variances[eta.index()]
    }

    pub fn cv_percent(&self, eta: Eta) -> f64 {
        100.0 * self.variance(eta).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!(
                "omega variances must be finite and >= 0, got {:?}",
                self.variances
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorModel {
    Additive,
    Proportional,
    Combined,
}

impl ErrorModel {
    pub fn uses_proportional(self) -> bool {
        matches!(self, ErrorModel::Proportional | ErrorModel::Combined)
    }

    pub fn uses_additive(self) -> bool {
        matches!(self, ErrorModel::Additive | ErrorModel::Combined)
    }
}

/// Residual error parameters. Inactive components are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    pub model: ErrorModel,
    /// Proportional SD (dimensionless CV).
    pub sigma_prop: f64,
    /// Additive SD, mg/L.
    pub sigma_add: f64,
}

impl SigmaParams {
    pub fn proportional(sigma_prop: f64) -> Self {
        SigmaParams { model: ErrorModel::Proportional, sigma_prop, sigma_add: 0.0 }
    }

    pub fn additive(sigma_add: f64) -> Self {
        SigmaParams { model: ErrorModel::Additive, sigma_prop: 0.0, sigma_add }
    }

    pub fn combined(sigma_add: f64, sigma_prop: f64) -> Self {
        SigmaParams { model: ErrorModel::Combined, sigma_prop, sigma_add }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |active: bool, v: f64, name: &str| -> Result<()> {
            match (active, v) {
                (true, v) if v >= 0.0 && v.is_finite() => Ok(()),
                (false, v) if v == 0.0 => Ok(()),
                (true, v) => Err(Error::Domain(format!("{name} must be >= 0, got {v}"))),
                (false, v) => Err(Error::Domain(format!(
                    "{name} is inactive under {:?} error and must be 0, got {v}",
                    self.model
                ))),
            }
        };
        check(self.model.uses_proportional(), self.sigma_prop, "SIGMA_PROP")?;
        check(self.model.uses_additive(), self.sigma_add, "SIGMA_ADD")
    }
}

/// Fixed effects, between-subject variances and residual error together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub theta: ThetaVector,
    pub omega: OmegaMatrix,
    pub sigma: SigmaParams,
}

impl ParameterSet {
    /// Published final estimates: BSV 41/47/81% CV, proportional error 14%.
    pub fn reference() -> Self {
        ParameterSet {
            theta: ThetaVector::reference(),
            omega: OmegaMatrix::from_cv_percent(41.0, 47.0, 81.0),
            sigma: SigmaParams::proportional(0.14),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.omega.validate()?;
        self.sigma.validate()
    }
}

/// Individual parameters for one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualParams {
    /// Apparent clearance, L/min.
    pub cl: f64,
    /// Apparent central volume, L.
    pub v: f64,
    /// Absorption rate constant, 1/min.
    pub ka: f64,
    /// Relative bioavailability.
    pub f: f64,
    /// Elimination rate constant `cl / v`, 1/min.
    pub ke: f64,
    #[serde(default)]
    pub peripheral: Option<Peripheral>,
    /// Zero-order input duration, min; replaces first-order absorption when set.
    #[serde(default)]
    pub zero_order_duration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peripheral {
    pub q: f64,
    pub v2: f64,
}

impl IndividualParams {
    /// One-compartment first-order absorption parameters.
    pub fn one_compartment(cl: f64, v: f64, ka: f64, f: f64) -> Self {
        IndividualParams { cl, v, ka, f, ke: cl / v, peripheral: None, zero_order_duration: None }
    }

    pub fn validate(&self) -> Result<()> {
        let mut values = vec![self.cl, self.v, self.ka, self.f];
        if let Some(p) = self.peripheral {
            values.extend([p.q, p.v2]);
        }
        if let Some(d) = self.zero_order_duration {
            values.push(d);
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("individual parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cv_round_trip() {
        let om = OmegaMatrix::from_cv_percent(41.0, 47.0, 81.0);
        assert!((om.cv_percent(Eta::V) - 47.0).abs() < 1e-12);
        assert!((om.variance(Eta::Cl) - 0.1681).abs() < 1e-15);
    }

    #[test]
    fn inactive_sigma_must_be_zero() {
        let mut s = SigmaParams::proportional(0.14);
        assert!(s.validate().is_ok());
        s.sigma_add = 0.01;
        assert!(s.validate().is_err());
    }

    #[test]
    fn reference_is_valid() {
        ParameterSet::reference().validate().unwrap();
        let mut p = ParameterSet::reference();
        p.theta.ka = 0.0;
        assert!(p.validate().is_err());
    }
}
