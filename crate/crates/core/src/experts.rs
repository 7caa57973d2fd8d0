//! Expert network: `E_i(z) = FC(ReLU(Conv(BN(z), K_i)))`, scaled by the gate
//! `a_i` to give the semantic vector `w_i`.

use crate::autodiff::TensorOps;
use crate::error::{Error, Result};
use crate::gating::GateOutput;
use crate::init::{uniform, SeededRng};
use crate::tensor::{BatchStats, BnMode, Tensor, BN_MOMENTUM};

/// Trainable parameters of one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<V> {
    /// `[k]`, odd length.
    pub kernel: V,
    pub bn_gamma: V,
    pub bn_beta: V,
    /// `[K, K]`; the output stays in latent space.
    pub fc_weight: V,
    pub fc_bias: V,
}

impl<V> ExpertParams<V> {
    pub fn map<U>(&self, index: usize, f: &mut impl FnMut(&str, &V) -> U) -> ExpertParams<U> {
        let name = |s: &str| format!("experts.{index}.{s}");
        ExpertParams {
            kernel: f(&name("kernel"), &self.kernel),
            bn_gamma: f(&name("bn.gamma"), &self.bn_gamma),
            bn_beta: f(&name("bn.beta"), &self.bn_beta),
            fc_weight: f(&name("fc.weight"), &self.fc_weight),
            fc_bias: f(&name("fc.bias"), &self.fc_bias),
        }
    }

    pub fn visit(&self, index: usize, f: &mut impl FnMut(&str, &V)) {
        self.map(index, &mut |name, v| f(name, v));
    }
}

impl ExpertParams<Tensor> {
    pub fn init(rng: &mut SeededRng, latent: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel > latent {
            return Err(Error::Config(format!("expert kernel length {kernel} must be odd and at most {latent}")));
        }
        let bf = 1.0 / (latent as f64).sqrt();
        Ok(Self {
            kernel: uniform(rng, &[kernel], 1.0 / (kernel as f64).sqrt()),
            bn_gamma: Tensor::full(&[1, latent], 1.0),
            bn_beta: Tensor::zeros(&[1, latent]),
            fc_weight: uniform(rng, &[latent, latent], bf),
            fc_bias: uniform(rng, &[1, latent], bf),
        })
    }
}

/// Running batch-normalization statistics of one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self { mean: Tensor::zeros(&[1, features]), var: Tensor::full(&[1, features], 1.0) }
    }

    /// Exponential update with momentum 0.1; the variance uses the unbiased
    /// batch estimate when the batch has more than one row.
    pub fn update(&mut self, stats: &BatchStats) {
        let b = stats.batch as f64;
        let correction = if stats.batch > 1 { b / (b - 1.0) } else { 1.0 };
        for (r, m) in self.mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }

    pub fn mode(&self) -> BnMode<'_> {
        BnMode::Eval { mean: &self.mean, var: &self.var }
    }
}

/// `n` semantic vectors for one latent, one row per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVectorSet {
    /// `[n, K]`; row `i` came from expert `i`.
    pub w: Tensor,
    /// Gate weight `a_i` that scaled row `i`.
    pub gates: Vec<f64>,
}

impl SemanticVectorSet {
    pub fn n(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn latent(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.w.row_slice(i)
    }

    pub fn mean_row_norm(&self) -> f64 {
        (0..self.n()).map(|i| self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / self.n() as f64
    }
}

/// Output of one expert for a `[B, K]` batch.
pub fn expert_forward<O: TensorOps>(
    ops: &mut O,
    z: &O::V,
    p: &ExpertParams<O::V>,
    bn: BnMode<'_>,
) -> Result<(O::V, Option<BatchStats>)> {
    let (normed, stats) = ops.batchnorm(z, &p.bn_gamma, &p.bn_beta, bn)?;
    let conv = ops.conv1d(&normed, &p.kernel)?;
    let act = ops.relu(&conv)?;
    let wt = ops.transpose(&p.fc_weight)?;
    let out = ops.matmul(&act, &wt)?;
    Ok((ops.add_bias(&out, &p.fc_bias)?, stats))
}

/// Semantic vectors of a batch.
pub struct MdnForward<V> {
    /// One `[n, K]` matrix per batch row.
    pub w: Vec<V>,
    /// `[B, n]` gate weights.
    pub a: V,
    pub gates: Vec<GateOutput<V>>,
    /// Per-expert batch statistics (train mode only).
    pub stats: Vec<BatchStats>,
}

/// Combines gate weights `a` (`[B, n]`) with expert outputs: `w_i = a_i E_i(z)`,
/// stacked into one `[n, K]` matrix per latent.
pub fn mdn_forward<O: TensorOps>(
    ops: &mut O,
    z: &O::V,
    a: &O::V,
    experts: &[ExpertParams<O::V>],
    bn: &[BnMode<'_>],
) -> Result<(Vec<O::V>, Vec<BatchStats>)> {
    let (batch, n) = ops.value(a).dims2()?;
    if n != experts.len() || bn.len() != n {
        return Err(Error::Dimension(format!(
            "{n} gate weights for {} experts ({} normalization modes)",
            experts.len(),
            bn.len()
        )));
    }
    let mut scaled = Vec::with_capacity(n);
    let mut stats = Vec::new();
    for (i, (p, mode)) in experts.iter().zip(bn).enumerate() {
        let (e, s) = expert_forward(ops, z, p, *mode)?;
        stats.extend(s);
        let ai = ops.slice_cols(a, i, 1)?;
        scaled.push(ops.scale_rows(&e, &ai)?);
    }
    let mut per_latent = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = scaled.iter().map(|w| ops.slice_rows(w, b, 1)).collect::<Result<Vec<_>>>()?;
        per_latent.push(ops.concat_rows(&rows)?);
    }
    Ok((per_latent, stats))
}
