//! Scalar abstraction for the network core.
//!
//! The differentiable-network types are generic over [`Real`] so the same
//! kernels run in `f32` or `f64`; the crate root re-exports `f64` aliases,
//! which every experiment module uses (model files store 64-bit floats).

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the network kernels.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion for literals and hyperparameters (always representable).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Lossy widening back to `f64` for reporting.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
