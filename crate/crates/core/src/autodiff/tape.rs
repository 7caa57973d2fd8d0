//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node that stores its value and the inputs it was
//! computed from. Nodes are only ever appended, so creation order is a
//! topological order and `backward` walks it in reverse.

use super::TensorOps;
use crate::error::{dim_err, Result};
use crate::tensor::{self as k, BatchStats, BnMode, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    Conv1d(usize, usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    AddBias(usize, usize),
    ScaleRows(usize, usize),
    ScaleCols(usize, usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing flowed back.
    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(&v)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (a parameter or a point of evaluation).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let r = self.req(inputs);
        self.push(value, op, r)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Back-propagates from a single-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.val(output.0);
        if !out.is_scalar() {
            return Err(dim_err!("backward from non-scalar node of shape {:?}", out.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                grads[parent] = Some(match grads[parent].take() {
                    Some(acc) => k::add(&acc, &pg)?,
                    None => pg,
                });
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient contributions of `node` to each of its inputs, given the
    /// gradient `g` flowing into the node's output.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let da = k::matmul(g, &k::transpose(self.val(*b))?)?;
                let db = k::matmul(&k::transpose(self.val(*a))?, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, k::transpose(g)?)],
            Op::Add(a, b) => vec![(*a, reduce_like(g, self.val(*a))), (*b, reduce_like(g, self.val(*b)))],
            Op::Sub(a, b) => {
                vec![(*a, reduce_like(g, self.val(*a))), (*b, reduce_like(&k::scale(g, -1.0), self.val(*b)))]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                vec![(*a, reduce_like(&k::mul(g, vb)?, va)), (*b, reduce_like(&k::mul(g, va)?, vb))]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let da = k::div(g, vb)?;
                let db = k::binary("div_backward", &k::mul(g, y)?, vb, |gy, b| -gy / b)?;
                vec![(*a, reduce_like(&da, va)), (*b, reduce_like(&db, vb))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, c) => vec![(*a, k::scale(g, *c))],
            Op::Sigmoid(a) => vec![(*a, k::binary("sigmoid_backward", g, y, |g, s| g * s * (1.0 - s))?)],
            Op::Tanh(a) => vec![(*a, k::binary("tanh_backward", g, y, |g, t| g * (1.0 - t * t))?)],
            Op::Relu(a) => {
                vec![(*a, k::binary("relu_backward", g, self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?)]
            }
            Op::Exp(a) => vec![(*a, k::mul(g, y)?)],
            Op::Ln(a) => vec![(*a, k::div(g, self.val(*a))?)],
            Op::Sqrt(a) => vec![(*a, k::binary("sqrt_backward", g, y, |g, s| g / (2.0 * s))?)],
            Op::Square(a) => vec![(*a, k::binary("square_backward", g, self.val(*a), |g, x| 2.0 * g * x)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.val(*a).shape(), g.item()?))],
            Op::SumAxis(a, axis) => {
                let (m, n) = self.val(*a).dims2()?;
                vec![(*a, k::expand_axis(g, *axis, m, n)?)]
            }
            Op::Softmax(a, axis) => vec![(*a, k::softmax_backward(y, g, *axis)?)],
            Op::Conv1d(x, kern) => {
                let (dx, dk) = k::conv1d_backward(self.val(*x), self.val(*kern), g)?;
                vec![(*x, dx), (*kern, dk)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (b, f) = xhat.dims2()?;
                let gam = self.val(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..b {
                    for j in 0..f {
                        let gy = g.data()[i * f + j];
                        dbeta[j] += gy;
                        dgamma[j] += gy * xhat.data()[i * f + j];
                    }
                }
                let mut dx = vec![0.0; b * f];
                for j in 0..f {
                    if *train {
                        // dxhat = g * gamma; dx = inv/B * (B dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let sum_d = dbeta[j] * gam[j];
                        let sum_dx = dgamma[j] * gam[j];
                        for i in 0..b {
                            let dxh = g.data()[i * f + j] * gam[j];
                            let xh = xhat.data()[i * f + j];
                            dx[i * f + j] = inv_std[j] / b as f64 * (b as f64 * dxh - sum_d - xh * sum_dx);
                        }
                    } else {
                        for i in 0..b {
                            dx[i * f + j] = g.data()[i * f + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                let gshape = self.val(*gamma).shape().to_vec();
                let bshape = self.val(*beta).shape().to_vec();
                vec![
                    (*x, Tensor::from_op("batchnorm_backward", vec![b, f], dx)?),
                    (*gamma, Tensor::from_op("batchnorm_backward", gshape, dgamma)?),
                    (*beta, Tensor::from_op("batchnorm_backward", bshape, dbeta)?),
                ]
            }
            Op::AddBias(x, b) => {
                let db = k::sum_axis(g, 0)?;
                let db = k::reshape(&db, self.val(*b).shape())?;
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (self.val(*x), self.val(*s));
                let dx = k::scale_rows(g, vs)?;
                let ds = k::reshape(&k::sum_axis(&k::mul(g, vx)?, 1)?, vs.shape())?;
                vec![(*x, dx), (*s, ds)]
            }
            Op::ScaleCols(x, s) => {
                let (vx, vs) = (self.val(*x), self.val(*s));
                let dx = k::scale_cols(g, vs)?;
                let ds = k::reshape(&k::sum_axis(&k::mul(g, vx)?, 0)?, vs.shape())?;
                vec![(*x, dx), (*s, ds)]
            }
            Op::SliceRows(x, start) => {
                let (m, _) = self.val(*x).dims2()?;
                vec![(*x, k::pad_rows(g, *start, m)?)]
            }
            Op::SliceCols(x, start) => {
                let (_, d) = self.val(*x).dims2()?;
                vec![(*x, k::pad_cols(g, *start, d)?)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (m, _) = self.val(p).dims2()?;
                    out.push((p, k::slice_rows(g, offset, m)?));
                    offset += m;
                }
                out
            }
            Op::Reshape(x) => vec![(*x, k::reshape(g, self.val(*x).shape())?)],
        };
        Ok(out)
    }
}

/// Sums `g` down to a single element when the operand was scalar-broadcast.
fn reduce_like(g: &Tensor, operand: &Tensor) -> Tensor {
    if operand.is_scalar() && !g.is_scalar() {
        Tensor::full(operand.shape(), g.data().iter().sum())
    } else {
        g.clone()
    }
}

impl TensorOps for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::matmul(self.val(a.0), self.val(b.0))?;
        Ok(self.record(v, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let v = k::transpose(self.val(a.0))?;
        Ok(self.record(v, Op::Transpose(a.0), &[a.0]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::add(self.val(a.0), self.val(b.0))?;
        Ok(self.record(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::sub(self.val(a.0), self.val(b.0))?;
        Ok(self.record(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::mul(self.val(a.0), self.val(b.0))?;
        Ok(self.record(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::div(self.val(a.0), self.val(b.0))?;
        Ok(self.record(v, Op::Div(a.0, b.0), &[a.0, b.0]))
    }

    fn add_scalar(&mut self, a: &Var, c: f64) -> Result<Var> {
        let v = k::unary("add_scalar", self.val(a.0), |x| x + c)?;
        Ok(self.record(v, Op::AddScalar(a.0), &[a.0]))
    }

    fn mul_scalar(&mut self, a: &Var, c: f64) -> Result<Var> {
        let v = k::unary("mul_scalar", self.val(a.0), |x| x * c)?;
        Ok(self.record(v, Op::MulScalar(a.0, c), &[a.0]))
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("sigmoid", self.val(a.0), k::sigmoid_scalar)?;
        Ok(self.record(v, Op::Sigmoid(a.0), &[a.0]))
    }

    fn tanh(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("tanh", self.val(a.0), f64::tanh)?;
        Ok(self.record(v, Op::Tanh(a.0), &[a.0]))
    }

    fn relu(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("relu", self.val(a.0), |x| x.max(0.0))?;
        Ok(self.record(v, Op::Relu(a.0), &[a.0]))
    }

    fn exp(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("exp", self.val(a.0), f64::exp)?;
        Ok(self.record(v, Op::Exp(a.0), &[a.0]))
    }

    fn ln(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("ln", self.val(a.0), f64::ln)?;
        Ok(self.record(v, Op::Ln(a.0), &[a.0]))
    }

    fn sqrt(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("sqrt", self.val(a.0), f64::sqrt)?;
        Ok(self.record(v, Op::Sqrt(a.0), &[a.0]))
    }

    fn square(&mut self, a: &Var) -> Result<Var> {
        let v = k::unary("square", self.val(a.0), |x| x * x)?;
        Ok(self.record(v, Op::Square(a.0), &[a.0]))
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        let v = k::sum(self.val(a.0));
        Ok(self.record(v, Op::Sum(a.0), &[a.0]))
    }

    fn sum_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let v = k::sum_axis(self.val(a.0), axis)?;
        Ok(self.record(v, Op::SumAxis(a.0, axis), &[a.0]))
    }

    fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let v = k::softmax(self.val(a.0), axis)?;
        Ok(self.record(v, Op::Softmax(a.0, axis), &[a.0]))
    }

    fn conv1d(&mut self, x: &Var, kernel: &Var) -> Result<Var> {
        let v = k::conv1d(self.val(x.0), self.val(kernel.0))?;
        Ok(self.record(v, Op::Conv1d(x.0, kernel.0), &[x.0, kernel.0]))
    }

    fn batchnorm(&mut self, x: &Var, gamma: &Var, beta: &Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let out = k::batchnorm(self.val(x.0), self.val(gamma.0), self.val(beta.0), mode)?;
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat: out.xhat,
            inv_std: out.inv_std,
            train: matches!(mode, BnMode::Train),
        };
        let v = self.record(out.y, op, &[x.0, gamma.0, beta.0]);
        Ok((v, out.stats))
    }

    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let v = k::add_bias(self.val(x.0), self.val(b.0))?;
        Ok(self.record(v, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    fn scale_rows(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let v = k::scale_rows(self.val(x.0), self.val(s.0))?;
        Ok(self.record(v, Op::ScaleRows(x.0, s.0), &[x.0, s.0]))
    }

    fn scale_cols(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let v = k::scale_cols(self.val(x.0), self.val(s.0))?;
        Ok(self.record(v, Op::ScaleCols(x.0, s.0), &[x.0, s.0]))
    }

    fn slice_rows(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let v = k::slice_rows(self.val(x.0), start, len)?;
        Ok(self.record(v, Op::SliceRows(x.0, start), &[x.0]))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let v = k::slice_cols(self.val(x.0), start, len)?;
        Ok(self.record(v, Op::SliceCols(x.0, start), &[x.0]))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = k::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let r = self.req(&ids);
        Ok(self.push(v, Op::ConcatRows(ids), r))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let v = k::reshape(self.val(x.0), shape)?;
        Ok(self.record(v, Op::Reshape(x.0), &[x.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{assert_close, numeric_grad};
    use crate::autodiff::Eval;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn grad_check(
        inputs: Vec<Tensor>,
        tol: f64,
        f: impl Fn(&mut Tape, &[Var]) -> Var,
        g: impl Fn(&[Tensor]) -> Tensor,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        // Weight the output so every element contributes a distinct slope.
        let shape = tape.value(&out).shape().to_vec();
        let n: usize = shape.iter().product();
        let weights = Tensor::new(shape.clone(), (0..n).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap();
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(&out, &wv).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt_or_zeros(&tape, vars[idx]);
            let numeric = numeric_grad(input, 1e-5, |x| {
                let mut args = inputs.clone();
                args[idx] = x.clone();
                let y = g(&args);
                y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
            });
            assert_close(analytic.data(), &numeric, tol);
        }
    }

    #[test]
    fn primitive_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            grad_check(
                vec![a.clone(), b.clone()],
                1e-6,
                |t, v| t.matmul(&v[0], &v[1]).unwrap(),
                |x| k::matmul(&x[0], &x[1]).unwrap(),
            );
            let c = rand_tensor(&mut rng, &[3, 4]);
            let pos = c.map(|x| x.abs() + 0.5);
            grad_check(
                vec![a.clone(), pos.clone()],
                1e-5,
                |t, v| t.div(&v[0], &v[1]).unwrap(),
                |x| k::div(&x[0], &x[1]).unwrap(),
            );
            grad_check(
                vec![a.clone(), c.clone()],
                1e-6,
                |t, v| {
                    let m = t.mul(&v[0], &v[1]).unwrap();
                    t.sub(&m, &v[1]).unwrap()
                },
                |x| k::sub(&k::mul(&x[0], &x[1]).unwrap(), &x[1]).unwrap(),
            );
            grad_check(
                vec![a.clone(), Tensor::scalar(rng.random_range(-2.0..2.0))],
                1e-6,
                |t, v| t.mul(&v[0], &v[1]).unwrap(),
                |x| k::mul(&x[0], &x[1]).unwrap(),
            );
            for unary in 0..7 {
                let input = if unary == 4 || unary == 5 { pos.clone() } else { a.clone() };
                grad_check(
                    vec![input],
                    1e-5,
                    |t, v| match unary {
                        0 => t.sigmoid(&v[0]).unwrap(),
                        1 => t.tanh(&v[0]).unwrap(),
                        2 => t.relu(&v[0]).unwrap(),
                        3 => t.exp(&v[0]).unwrap(),
                        4 => t.ln(&v[0]).unwrap(),
                        5 => t.sqrt(&v[0]).unwrap(),
                        _ => t.square(&v[0]).unwrap(),
                    },
                    |x| {
                        let mut e = Eval;
                        match unary {
                            0 => e.sigmoid(&x[0]).unwrap(),
                            1 => e.tanh(&x[0]).unwrap(),
                            2 => e.relu(&x[0]).unwrap(),
                            3 => e.exp(&x[0]).unwrap(),
                            4 => e.ln(&x[0]).unwrap(),
                            5 => e.sqrt(&x[0]).unwrap(),
                            _ => e.square(&x[0]).unwrap(),
                        }
                    },
                );
            }
            for axis in 0..2 {
                grad_check(
                    vec![a.clone()],
                    1e-6,
                    |t, v| t.softmax(&v[0], axis).unwrap(),
                    |x| k::softmax(&x[0], axis).unwrap(),
                );
                grad_check(
                    vec![a.clone()],
                    1e-6,
                    |t, v| t.sum_axis(&v[0], axis).unwrap(),
                    |x| k::sum_axis(&x[0], axis).unwrap(),
                );
            }
            let kern = rand_tensor(&mut rng, &[3]);
            grad_check(
                vec![a.clone(), kern],
                1e-6,
                |t, v| t.conv1d(&v[0], &v[1]).unwrap(),
                |x| k::conv1d(&x[0], &x[1]).unwrap(),
            );
            let gamma = rand_tensor(&mut rng, &[1, 4]);
            let beta = rand_tensor(&mut rng, &[1, 4]);
            grad_check(
                vec![a.clone(), gamma.clone(), beta.clone()],
                1e-5,
                |t, v| t.batchnorm(&v[0], &v[1], &v[2], BnMode::Train).unwrap().0,
                |x| k::batchnorm(&x[0], &x[1], &x[2], BnMode::Train).unwrap().y,
            );
            let mean = rand_tensor(&mut rng, &[1, 4]);
            let var = rand_tensor(&mut rng, &[1, 4]).map(|x| x.abs() + 0.1);
            grad_check(
                vec![a.clone(), gamma, beta],
                1e-6,
                |t, v| t.batchnorm(&v[0], &v[1], &v[2], BnMode::Eval { mean: &mean, var: &var }).unwrap().0,
                |x| k::batchnorm(&x[0], &x[1], &x[2], BnMode::Eval { mean: &mean, var: &var }).unwrap().y,
            );
            let bias = rand_tensor(&mut rng, &[1, 4]);
            let rows = rand_tensor(&mut rng, &[3, 1]);
            grad_check(
                vec![a.clone(), bias, rows],
                1e-6,
                |t, v| {
                    let y = t.add_bias(&v[0], &v[1]).unwrap();
                    let y = t.scale_rows(&y, &v[2]).unwrap();
                    let y = t.transpose(&y).unwrap();
                    t.mul_scalar(&y, -1.5).unwrap()
                },
                |x| {
                    let y = k::scale_rows(&k::add_bias(&x[0], &x[1]).unwrap(), &x[2]).unwrap();
                    k::scale(&k::transpose(&y).unwrap(), -1.5)
                },
            );
            let cols = rand_tensor(&mut rng, &[1, 4]);
            grad_check(
                vec![a.clone(), cols],
                1e-6,
                |t, v| {
                    let y = t.scale_cols(&v[0], &v[1]).unwrap();
                    let top = t.slice_rows(&y, 1, 2).unwrap();
                    let left = t.slice_cols(&y, 0, 2).unwrap();
                    let left = t.reshape(&left, &[2, 3]).unwrap();
                    let s = t.add_scalar(&top, 0.25).unwrap();
                    let s = t.reshape(&s, &[4, 2]).unwrap();
                    let s = t.transpose(&s).unwrap();
                    let s = t.reshape(&s, &[2, 4]).unwrap();
                    let both = t.concat_rows(&[s, y]).unwrap();
                    let total = t.sum(&left).unwrap();
                    t.mul(&both, &total).unwrap()
                },
                |x| {
                    let y = k::scale_cols(&x[0], &x[1]).unwrap();
                    let top = k::slice_rows(&y, 1, 2).unwrap();
                    let left = k::slice_cols(&y, 0, 2).unwrap();
                    let s = k::unary("t", &top, |v| v + 0.25).unwrap();
                    let s = k::reshape(&k::transpose(&k::reshape(&s, &[4, 2]).unwrap()).unwrap(), &[2, 4]).unwrap();
                    let both = k::concat_rows(&[&s, &y]).unwrap();
                    k::mul(&both, &k::sum(&left)).unwrap()
                },
            );
        }
    }

    #[test]
    fn sigmoid_slope_at_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.sigmoid(&x).unwrap();
        let g = tape.backward(y).unwrap();
        let s = 1.0 / (1.0 + (-1f64).exp());
        let analytic = s * (1.0 - s);
        assert!((analytic - 0.19661193324148185).abs() < 1e-15);
        let fd = (k::sigmoid_scalar(1.0 + 1e-5) - k::sigmoid_scalar(1.0 - 1e-5)) / 2e-5;
        assert!((g.wrt(x).unwrap().item().unwrap() - analytic).abs() < 1e-15);
        assert!((fd - analytic).abs() < 1e-8);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(&x, &c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 3.0);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }
}
