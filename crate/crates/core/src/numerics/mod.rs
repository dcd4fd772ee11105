//! Dense row-major matrices and a seeded RNG.
//!
//! Activations of shape `features x sequence x batch` are always stored
//! flattened as `features x (sequence * batch)`, so every layer operation
//! is a plain 2-D matrix identity.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{randn, Rng};

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar type a [`Matrix`] can hold.
///
/// Implemented for `f32` (default training precision) and `f64`
/// (gradient checks, reference oracles). Products are always accumulated
/// in `f64`, whatever the storage type.
pub trait Real:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Round half to even.
    fn round_even(self) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn round_even(self) -> Self {
        self.round_ties_even()
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn round_even(self) -> Self {
        self.round_ties_even()
    }
}
