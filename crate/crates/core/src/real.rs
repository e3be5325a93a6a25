//! Floating-point abstraction shared by all numeric operators.

use crate::tnsr::Dtype;
use ndarray::ScalarOperand;
use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type every numeric operator is generic over. Implemented for `f32`
/// and `f64`; exactness tests run in `f64`, training runs in `f32`.
pub trait Real:
    Float + NumAssignOps + ScalarOperand + Sum + Send + Sync + Debug + Display + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_(self) -> f64 {
        self
    }
}
