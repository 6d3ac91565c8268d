//! Scalar abstraction for the numerical core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar accepted by the GMRF and pooling code: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Sum + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine epsilon scaled tolerance used for symmetry checks.
    fn sym_tol() -> Self;
}

impl Real for f32 {
    fn sym_tol() -> Self {
        1e-5
    }
}

impl Real for f64 {
    fn sym_tol() -> Self {
        1e-12
    }
}
