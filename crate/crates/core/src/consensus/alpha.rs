//! Post-hoc estimation of the scaling parameter of a shared effect.

use serde::{Deserialize, Serialize};

use super::pool::combine_marginals;
use crate::error::{Error, Result};
use crate::gmrf::{GaussianDensity, GaussianMarginal};
use crate::scalar::Real;

/// Smallest `|μ|·√τ` of a denominator accepted by the ratio approximation.
pub const MIN_DENOMINATOR_SNR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate<T: Real> {
    /// Product of the per-node ratio approximations.
    pub gaussian: GaussianMarginal<T>,
    /// Median of the ratios of means.
    pub point: T,
    /// Node pairs that entered `gaussian`.
    pub node_count: usize,
    /// Node pairs dropped by the denominator check.
    pub filtered: usize,
}

/// Gaussian approximation of `num/den` for correlated Gaussians by a second-order expansion
/// around the means.
pub fn ratio_gaussian_approx<T: Real>(num: GaussianMarginal<T>, den: GaussianMarginal<T>, rho: T) -> Result<GaussianMarginal<T>> {
    if !(rho.abs() <= T::one()) {
        return Err(Error::RatioApprox(format!("correlation {rho} outside [-1, 1]")));
    }
    let (ms, ts) = (num.mean, num.precision);
    let (m, t) = (den.mean, den.precision);
    if !(m.abs() * t.sqrt() >= T::of(MIN_DENOMINATOR_SNR)) {
        return Err(Error::RatioApprox(format!("denominator N({m}, τ={t}) is too close to zero")));
    }
    let cross = rho / (ts * t).sqrt();
    let mean = ms / m + ms / (t * m.powi(3)) - cross / (m * m);
    let var = ms * ms / (t * m.powi(4)) + T::one() / (ts * m * m) - T::of(2.0) * cross * ms / m.powi(3);
    if !(var > T::zero()) {
        return Err(Error::RatioApprox(format!("approximate variance {var} is not positive")));
    }
    GaussianMarginal::new(mean, var.recip())
}

/// Pools per-node ratios `x*_i/x_i` into an estimate of α.
///
/// Pairs whose denominator fails the ratio precondition are dropped from the Gaussian
/// approximation; the point estimate is the median over every node with a non-zero denominator mean.
pub fn pool_alpha<T: Real>(nodes: &[(GaussianMarginal<T>, GaussianMarginal<T>, T)]) -> Result<AlphaEstimate<T>> {
    let mut approx = Vec::new();
    for &(num, den, rho) in nodes {
        match ratio_gaussian_approx(num, den, rho) {
            Ok(a) => approx.push(a),
            Err(Error::RatioApprox(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if approx.len() < 3 {
        return Err(Error::TooFewNodes { usable: approx.len() });
    }
    let mut ratios: Vec<T> = nodes.iter().filter(|(_, d, _)| d.mean != T::zero()).map(|(n, d, _)| n.mean / d.mean).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let k = ratios.len();
    let point = if k % 2 == 1 { ratios[k / 2] } else { (ratios[k / 2 - 1] + ratios[k / 2]) / T::of(2.0) };
    Ok(AlphaEstimate { gaussian: combine_marginals(&approx, None)?, point, node_count: approx.len(), filtered: nodes.len() - approx.len() })
}

/// Density of `x*/α` given the density of `x*`.
pub fn rescale_effect<T: Real>(density: &GaussianDensity<T>, alpha: T) -> Result<GaussianDensity<T>> {
    if alpha == T::zero() || !alpha.is_finite() {
        return Err(Error::InvalidGaussian(format!("cannot rescale by {alpha}")));
    }
    let mean = density.mean.iter().map(|m| *m / alpha).collect();
    let out = GaussianDensity::new(mean, density.precision.scaled(alpha * alpha), density.node_labels.clone())?;
    out.with_constraints(density.constraints.clone())
}

/// Marginal of `x*/α` given the marginal of `x*`.
pub fn rescale_marginal<T: Real>(m: GaussianMarginal<T>, alpha: T) -> Result<GaussianMarginal<T>> {
    if alpha == T::zero() || !alpha.is_finite() {
        return Err(Error::InvalidGaussian(format!("cannot rescale by {alpha}")));
    }
    GaussianMarginal::new(m.mean / alpha, m.precision * alpha * alpha)
}
