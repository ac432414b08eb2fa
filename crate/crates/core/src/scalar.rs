//! Floating-point scalar abstraction shared by every numerical module.
//!
//! All solvers are generic over [`Real`], implemented for `f32` and `f64`.
//! Configuration values are always parsed as `f64` and converted with
//! [`Real::of`] when a typed problem is built.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Value stored in cells that carry no meaningful value (obstacles, unreached cells).
pub const SENTINEL: f64 = 1e30;

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum<Self>
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or config value.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every Real")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn sentinel() -> Self {
        Self::of(SENTINEL)
    }

    /// True for values at or above half the sentinel (treated as "no value").
    #[inline]
    fn is_sentinel(self) -> bool {
        self.abs() >= Self::of(SENTINEL * 0.5)
    }

    /// Smallest positive normalizer used to avoid division by zero in relative norms.
    #[inline]
    fn tiny() -> Self {
        Self::of(1e-300).max(Self::min_positive_value())
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `log(1 + e^t)` without overflow for large `t`.
#[inline]
pub fn softplus<T: Real>(t: T) -> T {
    if t > T::zero() {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic sigmoid.
#[inline]
pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}
