//! Forward-mode differentiation with tensor-valued dual numbers.

use super::{DifferentiableMap, TensorOps};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{self as k, BatchStats, BnMode, Tensor};

/// A value together with its directional derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl Dual {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(dim_err!("tangent shape {:?} differs from primal shape {:?}", tangent.shape(), primal.shape()));
        }
        Ok(Self { primal, tangent })
    }

    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros_like(&primal);
        Self { primal, tangent }
    }
}

/// Forward-mode backend. Stateless; every value carries its own tangent.
#[derive(Clone, Copy, Debug, Default)]
pub struct Forward;

/// Jacobian-vector product `J(z) v` of `f` at `z`, in one forward pass.
pub fn jvp<F: DifferentiableMap>(f: &F, z: &Tensor, v: &Tensor) -> Result<Tensor> {
    let input = Dual::new(z.clone(), v.clone())?;
    Ok(f.apply(&mut Forward, &input)?.tangent)
}

fn same(a: &Tensor, ta: Tensor) -> Dual {
    Dual { primal: a.clone(), tangent: ta }
}

impl TensorOps for Forward {
    type V = Dual;

    fn constant(&mut self, t: Tensor) -> Dual {
        Dual::constant(t)
    }

    fn value<'a>(&'a self, v: &'a Dual) -> &'a Tensor {
        &v.primal
    }

    fn matmul(&mut self, a: &Dual, b: &Dual) -> Result<Dual> {
        let primal = k::matmul(&a.primal, &b.primal)?;
        let tangent = k::add(&k::matmul(&a.tangent, &b.primal)?, &k::matmul(&a.primal, &b.tangent)?)?;
        Ok(Dual { primal, tangent })
    }

    fn transpose(&mut self, a: &Dual) -> Result<Dual> {
        Ok(Dual { primal: k::transpose(&a.primal)?, tangent: k::transpose(&a.tangent)? })
    }

    fn add(&mut self, a: &Dual, b: &Dual) -> Result<Dual> {
        Ok(Dual { primal: k::add(&a.primal, &b.primal)?, tangent: k::add(&a.tangent, &b.tangent)? })
    }

    fn sub(&mut self, a: &Dual, b: &Dual) -> Result<Dual> {
        Ok(Dual { primal: k::sub(&a.primal, &b.primal)?, tangent: k::sub(&a.tangent, &b.tangent)? })
    }

    fn mul(&mut self, a: &Dual, b: &Dual) -> Result<Dual> {
        let primal = k::mul(&a.primal, &b.primal)?;
        let tangent = k::add(&k::mul(&a.tangent, &b.primal)?, &k::mul(&a.primal, &b.tangent)?)?;
        Ok(Dual { primal, tangent })
    }

    fn div(&mut self, a: &Dual, b: &Dual) -> Result<Dual> {
        let primal = k::div(&a.primal, &b.primal)?;
        // (a' - y b') / b
        let tangent = k::div(&k::sub(&a.tangent, &k::mul(&primal, &b.tangent)?)?, &b.primal)?;
        Ok(Dual { primal, tangent })
    }

    fn add_scalar(&mut self, a: &Dual, c: f64) -> Result<Dual> {
        Ok(Dual { primal: k::unary("add_scalar", &a.primal, |x| x + c)?, tangent: a.tangent.clone() })
    }

    fn mul_scalar(&mut self, a: &Dual, c: f64) -> Result<Dual> {
        Ok(Dual { primal: k::scale(&a.primal, c), tangent: k::scale(&a.tangent, c) })
    }

    fn sigmoid(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("sigmoid", &a.primal, k::sigmoid_scalar)?;
        let t = k::binary("sigmoid_tangent", &a.tangent, &y, |t, s| t * s * (1.0 - s))?;
        Ok(same(&y, t))
    }

    fn tanh(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("tanh", &a.primal, f64::tanh)?;
        let t = k::binary("tanh_tangent", &a.tangent, &y, |t, h| t * (1.0 - h * h))?;
        Ok(same(&y, t))
    }

    fn relu(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("relu", &a.primal, |x| x.max(0.0))?;
        let t = k::binary("relu_tangent", &a.tangent, &a.primal, |t, x| if x > 0.0 { t } else { 0.0 })?;
        Ok(same(&y, t))
    }

    fn exp(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("exp", &a.primal, f64::exp)?;
        let t = k::mul(&a.tangent, &y)?;
        Ok(same(&y, t))
    }

    fn ln(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("ln", &a.primal, f64::ln)?;
        let t = k::div(&a.tangent, &a.primal)?;
        Ok(same(&y, t))
    }

    fn sqrt(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("sqrt", &a.primal, f64::sqrt)?;
        let t = k::binary("sqrt_tangent", &a.tangent, &y, |t, s| t / (2.0 * s))?;
        Ok(same(&y, t))
    }

    fn square(&mut self, a: &Dual) -> Result<Dual> {
        let y = k::unary("square", &a.primal, |x| x * x)?;
        let t = k::binary("square_tangent", &a.tangent, &a.primal, |t, x| 2.0 * t * x)?;
        Ok(same(&y, t))
    }

    fn sum(&mut self, a: &Dual) -> Result<Dual> {
        Ok(Dual { primal: k::sum(&a.primal), tangent: k::sum(&a.tangent) })
    }

    fn sum_axis(&mut self, a: &Dual, axis: usize) -> Result<Dual> {
        Ok(Dual { primal: k::sum_axis(&a.primal, axis)?, tangent: k::sum_axis(&a.tangent, axis)? })
    }

    fn softmax(&mut self, a: &Dual, axis: usize) -> Result<Dual> {
        let y = k::softmax(&a.primal, axis)?;
        // y * (t - sum_axis(y * t)) has the same form as the reverse rule.
        let t = k::softmax_backward(&y, &a.tangent, axis)?;
        Ok(same(&y, t))
    }

    fn conv1d(&mut self, x: &Dual, kernel: &Dual) -> Result<Dual> {
        let primal = k::conv1d(&x.primal, &kernel.primal)?;
        let tangent = k::add(&k::conv1d(&x.tangent, &kernel.primal)?, &k::conv1d(&x.primal, &kernel.tangent)?)?;
        Ok(Dual { primal, tangent })
    }

    fn batchnorm(
        &mut self,
        x: &Dual,
        gamma: &Dual,
        beta: &Dual,
        mode: BnMode<'_>,
    ) -> Result<(Dual, Option<BatchStats>)> {
        let BnMode::Eval { .. } = mode else {
            return Err(Error::Capability("train-mode batch normalization".into()));
        };
        let out = k::batchnorm(&x.primal, &gamma.primal, &beta.primal, mode)?;
        let (b, f) = x.primal.dims2()?;
        let mut t = vec![0.0; b * f];
        for i in 0..b {
            for j in 0..f {
                let idx = i * f + j;
                t[idx] = x.tangent.data()[idx] * gamma.primal.data()[j] * out.inv_std[j]
                    + out.xhat.data()[idx] * gamma.tangent.data()[j]
                    + beta.tangent.data()[j];
            }
        }
        let tangent = Tensor::from_op("batchnorm_tangent", vec![b, f], t)?;
        Ok((Dual { primal: out.y, tangent }, None))
    }

    fn add_bias(&mut self, x: &Dual, b: &Dual) -> Result<Dual> {
        Ok(Dual { primal: k::add_bias(&x.primal, &b.primal)?, tangent: k::add_bias(&x.tangent, &b.tangent)? })
    }

    fn scale_rows(&mut self, x: &Dual, s: &Dual) -> Result<Dual> {
        let primal = k::scale_rows(&x.primal, &s.primal)?;
        let tangent = k::add(&k::scale_rows(&x.tangent, &s.primal)?, &k::scale_rows(&x.primal, &s.tangent)?)?;
        Ok(Dual { primal, tangent })
    }

    fn scale_cols(&mut self, x: &Dual, s: &Dual) -> Result<Dual> {
        let primal = k::scale_cols(&x.primal, &s.primal)?;
        let tangent = k::add(&k::scale_cols(&x.tangent, &s.primal)?, &k::scale_cols(&x.primal, &s.tangent)?)?;
        Ok(Dual { primal, tangent })
    }

    fn slice_rows(&mut self, x: &Dual, start: usize, len: usize) -> Result<Dual> {
        Ok(Dual { primal: k::slice_rows(&x.primal, start, len)?, tangent: k::slice_rows(&x.tangent, start, len)? })
    }

    fn slice_cols(&mut self, x: &Dual, start: usize, len: usize) -> Result<Dual> {
        Ok(Dual { primal: k::slice_cols(&x.primal, start, len)?, tangent: k::slice_cols(&x.tangent, start, len)? })
    }

    fn concat_rows(&mut self, parts: &[Dual]) -> Result<Dual> {
        let p: Vec<&Tensor> = parts.iter().map(|d| &d.primal).collect();
        let t: Vec<&Tensor> = parts.iter().map(|d| &d.tangent).collect();
        Ok(Dual { primal: k::concat_rows(&p)?, tangent: k::concat_rows(&t)? })
    }

    fn reshape(&mut self, x: &Dual, shape: &[usize]) -> Result<Dual> {
        Ok(Dual { primal: k::reshape(&x.primal, shape)?, tangent: k::reshape(&x.tangent, shape)? })
    }
}
