//! Floating-point scalar abstraction.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code path serves f32 (fast training) and f64 (gradient checks, geometry,
//! determinism tests). The bound pulls together the traits the three numeric
//! stacks need: `num_traits::Float` for elementwise math, `nalgebra::RealField`
//! for small fixed-size linear algebra, and `ndarray::LinalgScalar` so matrix
//! products dispatch to the blocked SIMD kernels.

use std::fmt::{Debug, Display};

/// Scalar type usable across the tensor, manifold and dataset code.
///
/// The conversion methods are named `narrow`/`widen` rather than `from_f64`/
/// `to_f64` to avoid resolution clashes with the identically named methods on
/// the `FromPrimitive`/`ToPrimitive` supertraits.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + nalgebra::RealField
    + ndarray::LinalgScalar
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from f64, rounding for f32.
    fn narrow(v: f64) -> Self;

    /// Widening conversion to f64 (exact for f32 and f64).
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

/// Shorthand for [`Scalar::narrow`] usable in expression position.
#[inline]
pub fn s<S: Scalar>(v: f64) -> S {
    S::narrow(v)
}
