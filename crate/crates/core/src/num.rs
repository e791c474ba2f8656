//! Scalar abstraction for the numeric core.
//!
//! Everything numeric is generic over [`Element`] so the same code runs in
//! `f32` or `f64`; the crate root pins `f64` aliases, which is what training,
//! checkpoints and the finite-difference gradient checks use.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tensor engine.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Convert an `f64` literal into the working scalar type.
///
/// Used for constants written in source (loss thresholds, epsilons, momentum
/// factors). Panics only if the target type cannot represent any `f64`, which
/// does not happen for the float types this crate supports.
#[inline]
pub fn lit<T: Element>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert to the element type")
}
