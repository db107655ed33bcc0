use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for parameters, features and metrics.
///
/// Implemented for `f32` and `f64`. Wire encodings always carry binary64, so
/// an `f32` value survives a round trip through `to_f64`/`from_f64` unchanged.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("float conversion")
    }

    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `num / den`, or zero when the denominator is zero.
pub(crate) fn ratio_or_zero<T: Scalar>(num: T, den: T) -> T {
    if den == T::zero() {
        T::zero()
    } else {
        num / den
    }
}
