//! Scalar abstraction for the numeric kernels (density estimation, weighted
//! moments, finite differences). The estimation pipeline itself runs in `f64`.

use num_traits::{Float, FromPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

pub trait Scalar: Float + FromPrimitive + Sum + Send + Sync + Debug + 'static {}

impl<T> Scalar for T where T: Float + FromPrimitive + Sum + Send + Sync + Debug + 'static {}

/// Converts an `f64` literal into the scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}
