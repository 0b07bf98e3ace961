//! Scalar abstraction so the numeric core runs in either f32 or f64.
//!
//! Training wants f32 throughput; the finite-difference gradient oracles and
//! the loss-identity checks want f64. Everything numeric downstream is generic
//! over this trait and the crate root exports concrete aliases.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum<Self>
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64; panics on values a float type cannot hold.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> scalar conversion")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + LinalgScalar
        + ScalarOperand
        + Sum<T>
        + Display
        + Debug
        + Send
        + Sync
        + 'static
{
}
