//! Floating-point scalar abstraction for the numeric stack.

use num_traits::FromPrimitive;

/// Floating point scalar: `f32` or `f64`.
///
/// `NdFloat` brings everything ndarray needs (including the fast matmul
/// dispatch used by convolution); `FromPrimitive` covers conversions from
/// counts and config values.
pub trait Scalar: ndarray::NdFloat + FromPrimitive + Default {
    fn from_float(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to scalar")
    }
    fn from_count(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize converts to scalar")
    }
    fn to_float(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
