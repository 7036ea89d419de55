//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! Every differentiable quantity in the model is a row-major matrix; a
//! vector is a `1×n` matrix and a scalar is `1×1`. Operations are recorded
//! on a [`Tape`] in execution order, which makes the record topologically
//! sorted by construction. [`Tape::backward`] replays it in reverse.
//!
//! Training runs in `f32`; the finite-difference oracle in [`gradcheck`]
//! runs in `f64`.

mod ddouble;
mod tape;
pub mod gradcheck;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Neg, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};

pub use ddouble::DoubleDouble;
pub use tape::{CosineMode, Gradients, Op, Tape, Var, COSINE_GUARD};

/// Floating point element type usable on a [`Tape`].
pub trait Real:
    LinalgScalar
    + ScalarOperand
    + PartialOrd
    + Neg<Output = Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
}

macro_rules! native_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}

native_real!(f32);
native_real!(f64);

/// Cosine similarity of two equal-length slices with denominator guard `delta`.
///
/// The accumulation order is fixed, so `cosine(u, v) == cosine(v, u)` bit for bit.
#[inline]
pub fn cosine_slices<T: Real>(u: &[T], v: &[T], delta: T) -> T {
    let (dot, nu, nv) = dot_norms(u, v);
    dot / (nu.sqrt() * nv.sqrt() + delta)
}

#[inline]
pub(crate) fn dot_norms<T: Real>(u: &[T], v: &[T]) -> (T, T, T) {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    (dot, nu, nv)
}

/// Softmax of `scores * gamma` with max subtraction. Panics on empty input.
pub fn softmax_slice<T: Real>(scores: &[T], gamma: T) -> Vec<T> {
    let max = scores
        .iter()
        .fold(T::neg_infinity(), |m, &s| m.max(gamma * s));
    let exps: Vec<T> = scores.iter().map(|&s| (gamma * s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
