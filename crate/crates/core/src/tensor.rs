//! Dense row-major `f64` tensors and the forward kernels shared by every
//! differentiation backend.
//!
//! Shapes are lists of positive extents. Most kernels work on rank-2 tensors
//! (`[rows, cols]`); vectors that take part in matrix math are stored as
//! `[1, d]` rows or `[d, 1]` columns. Elementwise binary kernels accept either
//! identical shapes or a single-element operand.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl Tensor {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} must be a non-empty list of positive extents"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!("shape {shape:?} holds {numel} elements but {} were given", data.len()));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction (element {pos})")));
        }
        Ok(Self { shape, data })
    }

    /// Result of a kernel. Finiteness is re-checked in debug builds only.
    pub(crate) fn from_op(op: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if cfg!(debug_assertions) && data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// A `[1, d]` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, data.len()], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(dim_err!("item() on tensor of shape {:?}", self.shape))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("expected a rank-2 tensor, got shape {s:?}")),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        transpose(self)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        add(self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        sub(self, other)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        scale(self, c)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        reshape(self, shape)
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor> {
        slice_rows(self, start, len)
    }

    /// `b` stacked copies of a `[1, d]` row.
    pub fn rows_repeated(&self, b: usize) -> Tensor {
        let d = self.numel();
        let data = self.data.iter().copied().cycle().take(b * d).collect();
        Tensor { shape: vec![b, d], data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Maximum absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn unary(op: &str, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::from_op(op, a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

/// Elementwise binary kernel with exact-shape or single-element broadcast.
pub(crate) fn binary(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_op(op, a.shape.clone(), data)
    } else if b.is_scalar() {
        let y = b.data[0];
        Tensor::from_op(op, a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect())
    } else if a.is_scalar() {
        let x = a.data[0];
        Tensor::from_op(op, b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect())
    } else {
        Err(dim_err!("{op}: incompatible shapes {:?} and {:?}", a.shape, b.shape))
    }
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub(crate) fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub(crate) fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b, |x, y| x / y)
}

pub(crate) fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul: inner dimensions differ ({m}x{k} by {k2}x{p})"));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for l in 0..k {
            let x = a.data[i * k + l];
            if x == 0.0 {
                continue;
            }
            let brow = &b.data[l * p..(l + 1) * p];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor::from_op("matmul", vec![m, p], out)
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_op("transpose", vec![n, m], out)
}

pub(crate) fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

/// Sum over `axis` of a rank-2 tensor, keeping the reduced axis with extent 1.
pub(crate) fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    match axis {
        0 => {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, x) in out.iter_mut().zip(a.row_slice(i)) {
                    *o += x;
                }
            }
            Tensor::from_op("sum_axis", vec![1, n], out)
        }
        1 => {
            let out = (0..m).map(|i| a.row_slice(i).iter().sum()).collect();
            Tensor::from_op("sum_axis", vec![m, 1], out)
        }
        _ => Err(dim_err!("sum_axis: axis {axis} out of range for rank 2")),
    }
}

/// Repeats a reduced axis back to `rows x cols` (inverse shape of `sum_axis`).
pub(crate) fn expand_axis(a: &Tensor, axis: usize, rows: usize, cols: usize) -> Result<Tensor> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if axis == 0 { a.data[j] } else { a.data[i] };
        }
    }
    Tensor::from_op("expand_axis", vec![rows, cols], out)
}

/// Numerically stable softmax along `axis` of a rank-2 tensor (or a vector).
pub(crate) fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = match a.shape.len() {
        1 => (1, a.shape[0]),
        _ => a.dims2()?,
    };
    if axis > 1 {
        return Err(dim_err!("softmax: axis {axis} out of range"));
    }
    let mut out = a.data.clone();
    let (lanes, len, stride, lane_step) = if axis == 1 || a.shape.len() == 1 { (m, n, 1, n) } else { (n, m, n, 1) };
    for lane in 0..lanes {
        let base = lane * lane_step;
        let idx = |t: usize| base + t * stride;
        let max = (0..len).map(|t| out[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for t in 0..len {
            let e = (out[idx(t)] - max).exp();
            out[idx(t)] = e;
            total += e;
        }
        for t in 0..len {
            out[idx(t)] /= total;
        }
    }
    Tensor::from_op("softmax", a.shape.clone(), out)
}

/// Sum of `y * g` along `axis`, broadcast back to the full shape.
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = match y.shape.len() {
        1 => (1, y.shape[0]),
        _ => y.dims2()?,
    };
    let mut out = vec![0.0; m * n];
    let axis = if y.shape.len() == 1 { 1 } else { axis };
    if axis == 1 {
        for i in 0..m {
            let dot: f64 = (0..n).map(|j| y.data[i * n + j] * g.data[i * n + j]).sum();
            for j in 0..n {
                out[i * n + j] = y.data[i * n + j] * (g.data[i * n + j] - dot);
            }
        }
    } else {
        for j in 0..n {
            let dot: f64 = (0..m).map(|i| y.data[i * n + j] * g.data[i * n + j]).sum();
            for i in 0..m {
                out[i * n + j] = y.data[i * n + j] * (g.data[i * n + j] - dot);
            }
        }
    }
    Tensor::from_op("softmax_backward", y.shape.clone(), out)
}

/// Checks that `kernel` has odd length `k <= width` and returns `k`.
pub(crate) fn conv_kernel_len(kernel: &Tensor, width: usize) -> Result<usize> {
    let k = kernel.numel();
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("conv1d kernel length {k} must be odd")));
    }
    if k > width {
        return Err(Error::Config(format!("conv1d kernel length {k} exceeds signal length {width}")));
    }
    Ok(k)
}

/// Row-wise "same" cross-correlation with zero padding:
/// `y[b, t] = sum_j kernel[j] * x[b, t + j - k/2]`.
pub(crate) fn conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (rows, width) = x.dims2()?;
    let k = conv_kernel_len(kernel, width)?;
    let c = (k / 2) as isize;
    let mut out = vec![0.0; rows * width];
    for b in 0..rows {
        let xr = x.row_slice(b);
        for t in 0..width {
            let mut acc = 0.0;
            for (j, &w) in kernel.data.iter().enumerate() {
                let s = t as isize + j as isize - c;
                if s >= 0 && (s as usize) < width {
                    acc += w * xr[s as usize];
                }
            }
            out[b * width + t] = acc;
        }
    }
    Tensor::from_op("conv1d", vec![rows, width], out)
}

/// Gradients of `conv1d` with respect to the signal and the kernel.
pub(crate) fn conv1d_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, width) = x.dims2()?;
    let k = kernel.numel();
    let c = (k / 2) as isize;
    let mut dx = vec![0.0; rows * width];
    let mut dk = vec![0.0; k];
    for b in 0..rows {
        for t in 0..width {
            let gy = g.data[b * width + t];
            for j in 0..k {
                let s = t as isize + j as isize - c;
                if s >= 0 && (s as usize) < width {
                    let s = s as usize;
                    dx[b * width + s] += kernel.data[j] * gy;
                    dk[j] += x.data[b * width + s] * gy;
                }
            }
        }
    }
    Ok((
        Tensor::from_op("conv1d_backward", x.shape.clone(), dx)?,
        Tensor::from_op("conv1d_backward", kernel.shape.clone(), dk)?,
    ))
}

/// `x[m, d] + b[1, d]` with `b` repeated over rows.
pub(crate) fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if b.numel() != d {
        return Err(dim_err!("add_bias: bias of {} elements for width {d}", b.numel()));
    }
    let mut out = x.data.clone();
    for i in 0..m {
        for (o, &bb) in out[i * d..(i + 1) * d].iter_mut().zip(&b.data) {
            *o += bb;
        }
    }
    Tensor::from_op("add_bias", x.shape.clone(), out)
}

/// Multiplies row `i` of `x[m, d]` by `s[i]` (`s` is `[m, 1]`).
pub(crate) fn scale_rows(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if s.numel() != m {
        return Err(dim_err!("scale_rows: {} scales for {m} rows", s.numel()));
    }
    let mut out = x.data.clone();
    for i in 0..m {
        out[i * d..(i + 1) * d].iter_mut().for_each(|o| *o *= s.data[i]);
    }
    Tensor::from_op("scale_rows", x.shape.clone(), out)
}

/// Multiplies column `j` of `x[m, d]` by `s[j]` (`s` is `[1, d]`).
pub(crate) fn scale_cols(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if s.numel() != d {
        return Err(dim_err!("scale_cols: {} scales for {d} columns", s.numel()));
    }
    let mut out = x.data.clone();
    for i in 0..m {
        for (o, &sc) in out[i * d..(i + 1) * d].iter_mut().zip(&s.data) {
            *o *= sc;
        }
    }
    Tensor::from_op("scale_cols", x.shape.clone(), out)
}

pub(crate) fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if len == 0 || start + len > m {
        return Err(dim_err!("slice_rows: rows {start}..{} of {m}", start + len));
    }
    Tensor::from_op("slice_rows", vec![len, d], x.data[start * d..(start + len) * d].to_vec())
}

pub(crate) fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if len == 0 || start + len > d {
        return Err(dim_err!("slice_cols: columns {start}..{} of {d}", start + len));
    }
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&x.data[i * d + start..i * d + start + len]);
    }
    Tensor::from_op("slice_cols", vec![m, len], out)
}

pub(crate) fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| dim_err!("concat_rows: no inputs"))?;
    let (_, d) = first.dims2()?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (m, pd) = p.dims2()?;
        if pd != d {
            return Err(dim_err!("concat_rows: width {pd} differs from {d}"));
        }
        rows += m;
        out.extend_from_slice(&p.data);
    }
    Tensor::from_op("concat_rows", vec![rows, d], out)
}

/// Places `g` into rows `start..start+len` of a zero `[m, d]` tensor.
pub(crate) fn pad_rows(g: &Tensor, start: usize, m: usize) -> Result<Tensor> {
    let (len, d) = g.dims2()?;
    let mut out = vec![0.0; m * d];
    out[start * d..(start + len) * d].copy_from_slice(&g.data);
    Tensor::from_op("pad_rows", vec![m, d], out)
}

pub(crate) fn pad_cols(g: &Tensor, start: usize, d: usize) -> Result<Tensor> {
    let (m, len) = g.dims2()?;
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        out[i * d + start..i * d + start + len].copy_from_slice(&g.data[i * len..(i + 1) * len]);
    }
    Tensor::from_op("pad_cols", vec![m, d], out)
}

pub(crate) fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
        return Err(dim_err!("reshape: {:?} cannot become {shape:?}", x.shape));
    }
    Ok(Tensor { shape: shape.to_vec(), data: x.data.clone() })
}

/// Batch-normalization statistics of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Biased (population) variance over the batch.
    pub var: Tensor,
    pub batch: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

pub(crate) struct BnForward {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
}

pub(crate) fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, mode: BnMode<'_>) -> Result<BnForward> {
    let (b, k) = x.dims2()?;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.numel() != k {
            return Err(dim_err!("batchnorm: {name} has {} elements for {k} features", t.numel()));
        }
    }
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let mean: Vec<f64> = (0..k).map(|j| (0..b).map(|i| x.data[i * k + j]).sum::<f64>() / b as f64).collect();
            let var: Vec<f64> =
                (0..k).map(|j| (0..b).map(|i| (x.data[i * k + j] - mean[j]).powi(2)).sum::<f64>() / b as f64).collect();
            let stats = BatchStats { mean: Tensor::row(mean.clone())?, var: Tensor::row(var.clone())?, batch: b };
            (mean, var, Some(stats))
        }
        BnMode::Eval { mean, var } => {
            if mean.numel() != k || var.numel() != k {
                return Err(dim_err!("batchnorm: running statistics do not match {k} features"));
            }
            (mean.data.clone(), var.data.clone(), None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; b * k];
    let mut y = vec![0.0; b * k];
    for i in 0..b {
        for j in 0..k {
            let h = (x.data[i * k + j] - mean[j]) * inv_std[j];
            xhat[i * k + j] = h;
            y[i * k + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok(BnForward {
        y: Tensor::from_op("batchnorm", vec![b, k], y)?,
        xhat: Tensor::from_op("batchnorm", vec![b, k], xhat)?,
        inv_std,
        stats,
    })
}
