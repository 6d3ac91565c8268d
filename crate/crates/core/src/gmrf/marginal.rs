use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Univariate Gaussian `N(mean, 1/precision)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginal<T: Real> {
    pub mean: T,
    pub precision: T,
}

impl<T: Real> GaussianMarginal<T> {
    pub fn new(mean: T, precision: T) -> Result<Self> {
        if !(precision > T::zero()) || !precision.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidGaussian(format!("marginal N({mean}, τ={precision}) is not valid")));
        }
        Ok(GaussianMarginal { mean, precision })
    }

    pub fn from_variance(mean: T, variance: T) -> Result<Self> {
        Self::new(mean, T::one() / variance)
    }

    pub fn variance(&self) -> T {
        T::one() / self.precision
    }

    pub fn sd(&self) -> T {
        self.variance().sqrt()
    }
}

/// Per-node marginal of a multivariate density in both precision conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMarginal<T: Real> {
    pub mean: T,
    /// `Q_ii`, the conditional precision of the node given the others.
    pub precision_diag: T,
    /// `1/(Q⁻¹)_ii`, the precision of the node's marginal.
    pub precision_exact: T,
}

impl<T: Real> NodeMarginal<T> {
    pub fn sd(&self) -> T {
        self.precision_exact.recip().sqrt()
    }

    pub fn exact(&self) -> GaussianMarginal<T> {
        GaussianMarginal { mean: self.mean, precision: self.precision_exact }
    }

    pub fn diag(&self) -> GaussianMarginal<T> {
        GaussianMarginal { mean: self.mean, precision: self.precision_diag }
    }
}
