//! Scalar abstraction for the metric math.
//!
//! Everything numeric in this crate (metric formulas, deconvolution, the
//! tree booster, the sharpness model) is written against [`Real`] so the
//! same code runs in `f32` or `f64`. The pipeline instantiates `f64`; see
//! the aliases at the crate root.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static
{
    /// Lossless-enough construction from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// `n` as a scalar, for averaging over counts.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in Real")
    }

    fn clamp01(self) -> Self {
        self.max(Self::zero()).min(Self::one())
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of<R: Real>(xs: &[R]) -> R {
        let sum = xs.iter().fold(R::zero(), |a, &b| a + b);
        sum / R::of_usize(xs.len())
    }

    #[test]
    fn generic_mean_matches_concrete() {
        let xs64 = [1.0f64, 2.0, 4.0];
        let xs32 = [1.0f32, 2.0, 4.0];
        assert_eq!(mean_of(&xs64), 7.0 / 3.0);
        assert_eq!(mean_of(&xs32), 7.0f32 / 3.0);
    }

    #[test]
    fn clamp01_saturates() {
        assert_eq!((-0.5f64).clamp01(), 0.0);
        assert_eq!(0.25f64.clamp01(), 0.25);
        assert_eq!(1.5f64.clamp01(), 1.0);
    }
}
