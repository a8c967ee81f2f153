//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (feature vectors, encoder weights, classifier
//! parameters) is generic over [`Real`] so the same code runs in `f32`
//! or `f64`. Accumulations (dot products, softmax, loss sums) are
//! always carried out in 64-bit arithmetic regardless of the storage
//! scalar; `Real` provides the lossless widening used for that.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the numeric core is generic over.
pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// Widen to `f64`. Exact for both `f32` and `f64`.
    fn as_f64(self) -> f64;

    /// Nearest representable value of an `f64` (rounds for `f32`).
    fn of(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
}

/// Dot product of two equal-length slices, accumulated in `f64`.
pub fn dot_f64<R: Real>(a: &[R], b: &[R]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}
