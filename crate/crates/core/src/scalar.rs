use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point type the likelihood and structural math is written against.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the value is unrepresentable,
    /// which cannot happen for finite literals in `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Item parameters are clamped into `[ITEM_EPS, 1 - ITEM_EPS]` whenever a
/// likelihood is evaluated.
pub const ITEM_EPS: f64 = 1e-6;

#[inline]
pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::lit(ITEM_EPS);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty slice or when
/// every term is `-inf`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[inline]
pub fn inv_logit<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(inv_logit(x))` without cancellation for large `|x|`.
#[inline]
pub fn log_inv_logit<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}
