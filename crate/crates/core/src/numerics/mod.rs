//! Dense 2-D tensors, stable reductions, and a tape-style reverse-mode
//! differentiation graph.

mod gradcheck;
mod graph;
mod tensor;

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use alloc::vec::Vec;
use num_traits::Float;

use crate::{Error, Result};

pub use gradcheck::{check_gradient, DEFAULT_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

/// Floating-point element type of tensors and graphs.
///
/// `f32` is the training precision; `f64` is the verification precision
/// assumed by every oracle and gradient check.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// `log Σ exp(v_i)` with max subtraction.
pub fn logsumexp<T: Real>(values: &[T]) -> Result<T> {
    let max = values
        .iter()
        .copied()
        .reduce(T::max)
        .ok_or(Error::EmptyReduction)?;
    if max == T::neg_infinity() {
        return Ok(max);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("logsumexp"));
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Numerically stable softmax of a non-empty finite vector.
pub fn softmax<T: Real>(values: &[T]) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    let shift = max + total.ln();
    for v in row.iter_mut() {
        *v = *v - shift;
    }
}
