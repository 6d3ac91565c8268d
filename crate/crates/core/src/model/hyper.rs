//! Hyperparameter priors and the internal (unconstrained) parameterization.
//!
//! Every θ is explored on its internal scale: log precision, `2·atanh(ρ)` for
//! correlations, and the identity for log-range, log-sd and share scalings.
//! Prior densities are densities of the internal value. `initial` and the
//! value of a `fixed` prior are given on the natural scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::spec::ModelSpec;
use crate::error::Result;
use crate::gmrf::HyperRole;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum HyperPrior {
    Normal {
        mean: f64,
        sd: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial: Option<f64>,
    },
    /// Gamma(shape, rate) on `exp(θ)`, expressed as a density of θ.
    #[serde(rename = "loggamma")]
    LogGamma {
        shape: f64,
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial: Option<f64>,
    },
    Flat {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial: Option<f64>,
    },
    Fixed { value: f64 },
}

impl HyperPrior {
    pub fn validate(&self, role: HyperRole) -> std::result::Result<(), String> {
        let check_initial = |init: &Option<f64>| match init {
            Some(v) if !role.to_internal(*v).is_finite() => Err(format!("initial value {v} is outside the parameter's domain")),
            _ => Ok(()),
        };
        match self {
            HyperPrior::Normal { mean, sd, initial } => {
                if !mean.is_finite() || !(*sd > 0.0) {
                    return Err("normal prior needs a finite mean and positive sd".into());
                }
                check_initial(initial)
            }
            HyperPrior::LogGamma { shape, rate, initial } => {
                if role != HyperRole::Precision {
                    return Err("loggamma priors apply to precision hyperparameters only".into());
                }
                if !(*shape > 0.0) || !(*rate > 0.0) {
                    return Err("loggamma prior needs positive shape and rate".into());
                }
                check_initial(initial)
            }
            HyperPrior::Flat { initial } => check_initial(initial),
            HyperPrior::Fixed { value } => {
                if role.to_internal(*value).is_finite() {
                    Ok(())
                } else {
                    Err(format!("fixed value {value} is outside the parameter's domain"))
                }
            }
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, HyperPrior::Fixed { .. })
    }

    /// Log density of the internal value.
    pub fn log_density(&self, theta: f64) -> f64 {
        match self {
            HyperPrior::Normal { mean, sd, .. } => {
                let z = (theta - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            HyperPrior::LogGamma { shape, rate, .. } => shape * rate.ln() - ln_gamma(*shape) + shape * theta - rate * theta.exp(),
            HyperPrior::Flat { .. } | HyperPrior::Fixed { .. } => 0.0,
        }
    }

    /// Starting point for the mode search, on the internal scale.
    pub fn initial_internal(&self, role: HyperRole) -> f64 {
        match self {
            HyperPrior::Normal { initial: Some(v), .. }
            | HyperPrior::LogGamma { initial: Some(v), .. }
            | HyperPrior::Flat { initial: Some(v) } => role.to_internal(*v),
            HyperPrior::Normal { mean, .. } => *mean,
            HyperPrior::LogGamma { shape, rate, .. } => (shape / rate).ln(),
            HyperPrior::Flat { .. } => 0.0,
            HyperPrior::Fixed { value } => role.to_internal(*value),
        }
    }
}

/// The free hyperparameters of a model, in name order, plus the fixed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSpace {
    pub names: Vec<String>,
    pub roles: Vec<HyperRole>,
    pub priors: Vec<HyperPrior>,
    /// Fixed hyperparameters on the natural scale.
    pub fixed: BTreeMap<String, f64>,
}

impl HyperSpace {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let bindings = spec.hyper_bindings()?;
        let mut space = HyperSpace { names: vec![], roles: vec![], priors: vec![], fixed: BTreeMap::new() };
        for (name, role) in bindings {
            let prior = spec.hyper_priors.get(&name).cloned().unwrap_or(HyperPrior::Flat { initial: None });
            match prior {
                HyperPrior::Fixed { value } => {
                    space.fixed.insert(name, value);
                }
                p => {
                    space.names.push(name);
                    space.roles.push(role);
                    space.priors.push(p);
                }
            }
        }
        Ok(space)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Natural-scale values of all hyperparameters (free and fixed).
    pub fn natural(&self, theta: &[f64]) -> BTreeMap<String, f64> {
        let mut out = self.fixed.clone();
        for ((name, role), v) in self.names.iter().zip(&self.roles).zip(theta) {
            out.insert(name.clone(), role.to_natural(*v));
        }
        out
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        self.priors.iter().zip(theta).map(|(p, v)| p.log_density(*v)).sum()
    }

    pub fn initial(&self) -> Vec<f64> {
        self.priors.iter().zip(&self.roles).map(|(p, r)| p.initial_internal(*r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loggamma_is_change_of_variables() {
        // density of θ = log τ with τ ~ Gamma(a, b) integrates to one
        let p = HyperPrior::LogGamma { shape: 2.0, rate: 0.5, initial: None };
        let h = 1e-3;
        let total: f64 = (-20000..20000).map(|i| p.log_density(i as f64 * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!((p.initial_internal(HyperRole::Precision) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn normal_density() {
        let p = HyperPrior::Normal { mean: 1.0, sd: 2.0, initial: None };
        let oracle = -0.5 * 0.25f64 - 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((p.log_density(2.0) - oracle).abs() < 1e-14);
    }

    #[test]
    fn validation() {
        assert!(HyperPrior::LogGamma { shape: 1.0, rate: 1.0, initial: None }.validate(HyperRole::LogRange).is_err());
        assert!(HyperPrior::Fixed { value: -1.0 }.validate(HyperRole::Precision).is_err());
        assert!(HyperPrior::Flat { initial: Some(1.5) }.validate(HyperRole::Correlation).is_err());
        assert!(HyperPrior::Flat { initial: Some(0.5) }.validate(HyperRole::Correlation).is_ok());
    }
}
