use super::TensorOps;
use crate::error::Result;
use crate::tensor::{self as k, BatchStats, BnMode, Tensor};

/// Plain evaluation backend: values only.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eval;

impl TensorOps for Eval {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::matmul(a, b)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        k::transpose(a)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::add(a, b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::mul(a, b)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::div(a, b)
    }

    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        k::unary("add_scalar", a, |x| x + c)
    }

    fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        k::unary("mul_scalar", a, |x| x * c)
    }

    fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("sigmoid", a, k::sigmoid_scalar)
    }

    fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("tanh", a, f64::tanh)
    }

    fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("relu", a, |x| x.max(0.0))
    }

    fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("exp", a, f64::exp)
    }

    fn ln(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("ln", a, f64::ln)
    }

    fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("sqrt", a, f64::sqrt)
    }

    fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        k::unary("square", a, |x| x * x)
    }

    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(k::sum(a))
    }

    fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        k::sum_axis(a, axis)
    }

    fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        k::softmax(a, axis)
    }

    fn conv1d(&mut self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        k::conv1d(x, kernel)
    }

    fn batchnorm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        mode: BnMode<'_>,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        let out = k::batchnorm(x, gamma, beta, mode)?;
        Ok((out.y, out.stats))
    }

    fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::add_bias(x, b)
    }

    fn scale_rows(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        k::scale_rows(x, s)
    }

    fn scale_cols(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        k::scale_cols(x, s)
    }

    fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        k::slice_rows(x, start, len)
    }

    fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        k::slice_cols(x, start, len)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        k::concat_rows(&refs)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        k::reshape(x, shape)
    }
}
