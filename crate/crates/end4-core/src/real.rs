//! Scalar abstraction so the numeric stack runs in either precision.
//!
//! Training runs in `f32`; verification (finite-difference gradient checks,
//! tight round-trip identities) instantiates the same code at `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the tensor stack.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + std::ops::AddAssign
    + Send
    + Sync
    + Debug
    + Display
    + serde::Serialize
    + 'static
{
    /// Storage tag used by checkpoints ("f32" or "f64").
    const DTYPE: &'static str;

    fn from_f(x: f64) -> Self;
    fn to_f(self) -> f64;

    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from U[lo, hi).
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f(x: f64) -> Self {
        x as f32
    }
    fn to_f(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f(x: f64) -> Self {
        x
    }
    fn to_f(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}
