//! Differentiation backends.
//!
//! Model code is written once against [`TensorOps`] and then run on one of
//! three backends:
//!
//! * [`Eval`]: plain evaluation, no derivative bookkeeping.
//! * [`Tape`]: reverse mode; records a Wengert list and back-propagates.
//! * [`Forward`]: forward mode; carries a tangent alongside every value,
//!   which yields Jacobian-vector products in a single pass.

mod dual;
mod eval;
mod tape;

pub use dual::{jvp, Dual, Forward};
pub use eval::Eval;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::tensor::{BatchStats, BnMode, Tensor};

/// The primitive set every differentiable computation in this crate uses.
///
/// Shapes follow the kernels in [`crate::tensor`]: binary elementwise ops take
/// identical shapes or a single-element operand; everything else is rank 2.
pub trait TensorOps {
    type V: Clone;

    /// A value that does not participate in differentiation.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// Primal value of a node.
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Result<Self::V>;
    fn mul_scalar(&mut self, a: &Self::V, c: f64) -> Result<Self::V>;

    fn sigmoid(&mut self, a: &Self::V) -> Result<Self::V>;
    fn tanh(&mut self, a: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, a: &Self::V) -> Result<Self::V>;
    fn exp(&mut self, a: &Self::V) -> Result<Self::V>;
    fn ln(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sqrt(&mut self, a: &Self::V) -> Result<Self::V>;
    fn square(&mut self, a: &Self::V) -> Result<Self::V>;

    /// Sum of all elements, as a `[1]` tensor.
    fn sum(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sum_axis(&mut self, a: &Self::V, axis: usize) -> Result<Self::V>;
    fn softmax(&mut self, a: &Self::V, axis: usize) -> Result<Self::V>;

    /// Row-wise "same" zero-padded cross-correlation with an odd-length kernel.
    fn conv1d(&mut self, x: &Self::V, kernel: &Self::V) -> Result<Self::V>;
    fn batchnorm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        mode: BnMode<'_>,
    ) -> Result<(Self::V, Option<BatchStats>)>;

    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale_rows(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn scale_cols(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn slice_rows(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn slice_cols(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
}

/// A differentiable map `R^K -> R^F` over row vectors.
pub trait DifferentiableMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Evaluates the map on a `[B, K]` batch of rows.
    fn apply<O: TensorOps>(&self, ops: &mut O, z: &O::V) -> Result<O::V>;
}
