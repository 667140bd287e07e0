//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! kernels run in f32 or f64. The shipped pipeline uses the f64 aliases at
//! the crate root; gradient-check tolerances assume 64-bit.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by tensors, attention kernels and the tape.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64 (literal constants, RNG draws, config values).
    fn cast(x: f64) -> Self;

    /// Widening conversion for serialization and diagnostics.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
