//! Pooling random-effect posteriors fitted on different parts of the data.

pub mod alpha;
pub mod pool;

pub use alpha::{pool_alpha, ratio_gaussian_approx, rescale_effect, rescale_marginal, AlphaEstimate};
pub use pool::{combine_marginal_fields, combine_marginals, combine_multivariate, marginals_from_multivariate, ExpertWeights};
