//! Floating-point abstraction for the compute core.
//!
//! Production code runs in `f32` (the [`Real`] alias); the finite-difference
//! gradient oracle instantiates the same code at `f64`, where central
//! differences are clean enough to resolve the stated tolerances.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Precision used by the model and training pipeline.
pub type Real = f32;

/// Scalar element type of tensors and tape nodes.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}
