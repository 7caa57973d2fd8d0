//! The mixture-of-experts direction network: gating + experts, with its
//! parameter tree and checkpoint layout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, TensorOps};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::experts::{self, ExpertParams, MdnForward, RunningStats, SemanticVectorSet};
use crate::gating::{self, AttentionParams, GruParams};
use crate::init::seeded;
use crate::tensor::{BnMode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdnConfig {
    /// Number of experts / attributes.
    pub n: usize,
    /// Latent width `K`.
    pub latent: usize,
    /// GRU hidden width `d_h`; must be divisible by `n`.
    pub hidden: usize,
    /// Odd convolution length per expert.
    pub kernel_sizes: Vec<usize>,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self { n: 4, latent: 16, hidden: 64, kernel_sizes: vec![3, 5, 7, 9] }
    }
}

impl MdnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.latent == 0 {
            return Err(Error::Config("n and latent width must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.n) {
            return Err(Error::Config(format!("hidden width {} is not divisible by {} experts", self.hidden, self.n)));
        }
        if self.kernel_sizes.len() != self.n {
            return Err(Error::Config(format!("{} kernel sizes for {} experts", self.kernel_sizes.len(), self.n)));
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0 || k > self.latent) {
            return Err(Error::Config(format!("kernel length {k} must be odd and at most {}", self.latent)));
        }
        Ok(())
    }

    pub fn token_width(&self) -> usize {
        self.hidden / self.n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-normalize with batch statistics.
    Train,
    /// Batch-normalize with running statistics.
    Eval,
}

/// All trainable parameters, generic over the node type of a backend.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnParams<V> {
    pub gru: GruParams<V>,
    pub attn: AttentionParams<V>,
    pub experts: Vec<ExpertParams<V>>,
}

impl<V> MdnParams<V> {
    /// Maps every parameter in a fixed order, passing its checkpoint name.
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &V) -> U) -> MdnParams<U> {
        MdnParams {
            gru: self.gru.map(f),
            attn: self.attn.map(f),
            experts: self.experts.iter().enumerate().map(|(i, e)| e.map(i, f)).collect(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &V)) {
        self.gru.visit(f);
        self.attn.visit(f);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(i, f);
        }
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    pub fn values(&self) -> Vec<V>
    where
        V: Clone,
    {
        let mut out = Vec::new();
        self.visit(&mut |_, v| out.push(v.clone()));
        out
    }

    /// Builds a tree with this shape from values listed in `visit` order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Result<MdnParams<U>> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!("{} values for {} parameters", values.len(), self.len())));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_, _| it.next().expect("length checked")))
    }
}

/// The direction network with its trainable parameters and normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdn {
    pub config: MdnConfig,
    pub params: MdnParams<Tensor>,
    pub running: Vec<RunningStats>,
}

impl Mdn {
    /// Uniform `±1/sqrt(fan_in)` initialization from `seed`.
    pub fn init(config: MdnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let token = config.token_width();
        let gru = GruParams::init(&mut rng, config.latent, config.hidden);
        let attn = AttentionParams::init(&mut rng, token, token);
        let experts = config
            .kernel_sizes
            .iter()
            .map(|&k| ExpertParams::init(&mut rng, config.latent, k))
            .collect::<Result<Vec<_>>>()?;
        let running = (0..config.n).map(|_| RunningStats::new(config.latent)).collect();
        Ok(Self { config, params: MdnParams { gru, attn, experts }, running })
    }

    /// Full forward pass on `[B, K]` latents with parameters bound to `ops`.
    pub fn forward<O: TensorOps>(
        &self,
        ops: &mut O,
        params: &MdnParams<O::V>,
        z: &O::V,
        mode: Mode,
    ) -> Result<MdnForward<O::V>> {
        let (_, k) = ops.value(z).dims2()?;
        if k != self.config.latent {
            return Err(Error::Dimension(format!("latent width {k}, network expects {}", self.config.latent)));
        }
        let (a, gates) = gating::gate_batch(ops, z, &params.gru, &params.attn, self.config.n)?;
        let modes: Vec<BnMode> = match mode {
            Mode::Train => vec![BnMode::Train; self.config.n],
            Mode::Eval => self.running.iter().map(RunningStats::mode).collect(),
        };
        let (w, stats) = experts::mdn_forward(ops, z, &a, &params.experts, &modes)?;
        Ok(MdnForward { w, a, gates, stats })
    }

    /// Semantic vectors for each row of `z` (`[B, K]`), using running statistics.
    pub fn semantic_vectors(&self, z: &Tensor) -> Result<Vec<SemanticVectorSet>> {
        let out = self.forward(&mut Eval, &self.params, z, Mode::Eval)?;
        Ok(out
            .w
            .into_iter()
            .enumerate()
            .map(|(b, w)| SemanticVectorSet { w, gates: out.a.row_slice(b).to_vec() })
            .collect())
    }

    pub fn semantic_vectors_one(&self, z: &Tensor) -> Result<SemanticVectorSet> {
        let z = crate::tensor::reshape(z, &[1, self.config.latent])?;
        Ok(self.semantic_vectors(&z)?.remove(0))
    }

    /// Raw output `E_i(z)` of expert `i` in eval mode.
    pub fn expert_output(&self, i: usize, z: &Tensor) -> Result<Tensor> {
        let p = self
            .params
            .experts
            .get(i)
            .ok_or_else(|| Error::Argument(format!("expert index {i} out of range 0..{}", self.config.n)))?;
        Ok(experts::expert_forward(&mut Eval, z, p, self.running[i].mode())?.0)
    }

    pub fn update_running(&mut self, stats: &[crate::tensor::BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_meta("mdn.config", serde_json::to_value(&self.config)?);
        let mut result = Ok(());
        self.params.visit(&mut |name, t| {
            if result.is_ok() {
                result = ckpt.insert(name, t.clone());
            }
        });
        result?;
        for (i, r) in self.running.iter().enumerate() {
            ckpt.insert(format!("experts.{i}.bn.running_mean"), r.mean.clone())?;
            ckpt.insert(format!("experts.{i}.bn.running_var"), r.var.clone())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: MdnConfig = serde_json::from_value(
            ckpt.meta("mdn.config").cloned().ok_or_else(|| Error::Format("missing mdn.config".into()))?,
        )?;
        let template = Self::init(config.clone(), 0)?;
        let mut values = Vec::new();
        for name in template.params.names() {
            let t = ckpt.require(&name)?;
            let mut expected = None;
            template.params.visit(&mut |n, v| {
                if n == name {
                    expected = Some(v.shape().to_vec());
                }
            });
            if Some(t.shape().to_vec()) != expected {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
            }
            values.push(t.clone());
        }
        let params = template.params.rebuild(values)?;
        let running = (0..config.n)
            .map(|i| {
                Ok(RunningStats {
                    mean: ckpt.require(&format!("experts.{i}.bn.running_mean"))?.clone(),
                    var: ckpt.require(&format!("experts.{i}.bn.running_var"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params, running })
    }
}
