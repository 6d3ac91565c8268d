//! Sparse-precision Gaussian Markov random fields.

pub mod cholesky;
pub mod dense;
pub mod density;
pub mod marginal;
pub mod precision;
pub mod sparse;
pub mod triplet;

pub use cholesky::{marginal_variances, Cholesky, SelectedInverse, Symbolic};
pub use density::{sample_gmrf, Constraints, FactoredDensity, GaussianDensity};
pub use marginal::{GaussianMarginal, NodeMarginal};
pub use precision::{build_effect_precision, build_effect_prior, EffectKind, EffectPrior, EffectSpec, HyperRole};
pub use sparse::SparsePrecision;

use crate::error::Result;
use crate::scalar::Real;

/// Cholesky factorization of `q`.
pub fn factorize<T: Real>(q: &SparsePrecision<T>) -> Result<Cholesky<T>> {
    Cholesky::new(q)
}
