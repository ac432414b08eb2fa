//! Congestion-dependent maximum airspeed: a log-sum-exp smoothed Greenshields
//! law with an outer clamp to the scenario speed range.

use crate::config::FdConfig;
use crate::scalar::Real;

/// `(1/beta) * log(exp(beta*a) + exp(beta*b))` in overflow-safe form.
///
/// Exactly symmetric in `a` and `b`.
#[inline]
pub fn smooth_max<T: Real>(a: T, b: T, beta: T) -> T {
    let hi = a.max(b);
    hi + (-beta * (a - b).abs()).exp().ln_1p() / beta
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalDiagram<T> {
    pub v_max0: T,
    pub v_min: T,
    pub rho_jam: T,
    pub beta: T,
    pub clip_lo: T,
    pub clip_hi: T,
}

impl<T: Real> FundamentalDiagram<T> {
    pub fn from_config(fd: &FdConfig) -> Self {
        Self {
            v_max0: T::of(fd.v_max0),
            v_min: T::of(fd.v_min),
            rho_jam: T::of(fd.rho_jam),
            beta: T::of(fd.beta),
            clip_lo: T::of(fd.clip_lo),
            clip_hi: T::of(fd.clip_hi),
        }
    }

    /// Unclamped smoothed Greenshields speed.
    #[inline]
    pub fn v_max_unclamped(&self, rho: T) -> T {
        let greenshields = self.v_max0 * (T::one() - rho / self.rho_jam);
        smooth_max(self.v_min, greenshields, self.beta)
    }

    /// Maximum airspeed at density `rho`, clamped to `[clip_lo, clip_hi]`.
    #[inline]
    pub fn v_max(&self, rho: T) -> T {
        self.v_max_unclamped(rho).max(self.clip_lo).min(self.clip_hi)
    }
}
