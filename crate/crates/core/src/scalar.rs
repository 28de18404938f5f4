//! Scalar abstraction so the whole stack runs in f32 (training, storage)
//! or f64 (gradient checks, reference oracles) without duplication.

use std::fmt::{Debug, Display};

/// Floating-point element type for tensors, weights and losses.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 literals and RNG draws.
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
