//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type accepted by the signal and network code: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + rustfft::FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width tag used by the checkpoint archive.
    const DTYPE: u8;

    /// Converts an `f64` literal. Panics only for values outside the type's range.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of scalar range")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
}

/// Modulus floor below which a complex value is treated as having no phase.
pub const EPS_MODULUS: f64 = 1e-12;
