//! Latent Gaussian model inference with sequential consensus over partitioned data.

pub mod consensus;
pub mod error;
pub mod gmrf;
pub mod infer;
pub mod model;
pub mod report;
pub mod scalar;
pub mod sequential;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Precision = gmrf::SparsePrecision<f64>;
pub type Precision32 = gmrf::SparsePrecision<f32>;
pub type Density = gmrf::GaussianDensity<f64>;
pub type Density32 = gmrf::GaussianDensity<f32>;
pub type Marginal = gmrf::GaussianMarginal<f64>;
pub type Marginal32 = gmrf::GaussianMarginal<f32>;
