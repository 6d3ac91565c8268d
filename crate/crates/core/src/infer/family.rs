//! Observation log-likelihoods and their derivatives in the linear predictor.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::Family;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-likelihood of one observation with its first derivative and negative
/// second derivative in `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLik {
    pub value: f64,
    pub grad: f64,
    pub curvature: f64,
}

/// Checks that `y` is in the support of `family`.
pub fn check_response(family: Family, y: f64) -> std::result::Result<(), String> {
    let ok = match family {
        Family::Gaussian => y.is_finite(),
        Family::Poisson | Family::LgcpLattice => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        Family::Gamma => y > 0.0 && y.is_finite(),
        Family::Bernoulli => y == 0.0 || y == 1.0,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("response {y} is outside the support of the {} family", family.name()))
    }
}

/// Response-only part of the log-likelihood, constant in `eta`.
pub fn response_constant(family: Family, y: f64, hyper: f64) -> f64 {
    match family {
        Family::Gaussian => 0.5 * (hyper.ln() - LN_2PI),
        Family::Poisson | Family::LgcpLattice => -ln_gamma(y + 1.0),
        Family::Gamma => hyper * hyper.ln() - ln_gamma(hyper) + (hyper - 1.0) * y.ln(),
        Family::Bernoulli => 0.0,
    }
}

/// Log-likelihood of `y` at linear predictor `eta` (offset included), without the
/// response constant. `hyper` is the observation precision (gaussian) or shape (gamma).
pub fn point_loglik(family: Family, y: f64, eta: f64, hyper: f64) -> PointLik {
    match family {
        Family::Gaussian => {
            let r = y - eta;
            PointLik { value: -0.5 * hyper * r * r, grad: hyper * r, curvature: hyper }
        }
        Family::Poisson | Family::LgcpLattice => {
            let mu = eta.exp();
            PointLik { value: y * eta - mu, grad: y - mu, curvature: mu }
        }
        Family::Gamma => {
            // mean exp(eta), shape `hyper`
            let z = y * (-eta).exp();
            PointLik { value: -hyper * (eta + z), grad: hyper * (z - 1.0), curvature: hyper * z }
        }
        Family::Bernoulli => {
            let p = 1.0 / (1.0 + (-eta).exp());
            // log(1 + e^eta) computed stably
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            PointLik { value: y * eta - softplus, grad: y - p, curvature: p * (1.0 - p) }
        }
    }
}

/// Poisson lattice approximation of the LGCP log-likelihood.
pub fn lgcp_lattice_loglik(counts: &[f64], eta: &[f64], areas: &[f64]) -> Result<f64> {
    if counts.len() != eta.len() || counts.len() != areas.len() {
        return Err(Error::Dimension(format!(
            "counts, eta and areas have lengths {}, {}, {}",
            counts.len(),
            eta.len(),
            areas.len()
        )));
    }
    let mut total = 0.0;
    for ((&c, &e), &a) in counts.iter().zip(eta).zip(areas) {
        if !(c >= 0.0) || c.fract() != 0.0 {
            return Err(Error::Domain(format!("count {c} is not a non-negative integer")));
        }
        if !(a > 0.0) {
            return Err(Error::Domain(format!("cell area {a} is not positive")));
        }
        total += c * (e + a.ln()) - e.exp() * a - ln_gamma(c + 1.0);
    }
    Ok(total)
}
