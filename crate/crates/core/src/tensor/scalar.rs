//! Element type abstraction: f32 for training, f64 for the gradient verification mode.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element of a [`crate::tensor::Tensor`].
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`
/// so finite differences have enough headroom.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    const DTYPE_CODE: u8;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
}

/// Shorthand for converting an `f64` literal into the active scalar type.
#[inline]
pub fn sc<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 representable in scalar type")
}
