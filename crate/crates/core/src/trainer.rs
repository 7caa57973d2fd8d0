//! Training loop for the direction network: fixed latent dataset, per-sample
//! Jacobians, Adam updates, and exactly resumable state.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorOps};
use crate::checkpoint::Checkpoint;
use crate::data::sample_latents;
use crate::error::{Error, Result};
use crate::generator::Pushforward;
use crate::init::derive_seed;
use crate::losses::{ga_loss, ga_loss_with, ppa_loss_with, total_loss, AlignmentSummary, PpaConfig};
use crate::mdn::{Mdn, MdnConfig, Mode};
use crate::optim::{AdamConfig, AdamState};
use crate::sbv::BoundarySet;
use crate::tensor::Tensor;

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    #[serde(rename = "K")]
    pub latent: usize,
    pub d_h: usize,
    pub kernel_sizes: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub r_temp: f64,
    pub sigma_q: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Size of the fixed latent dataset traversed once in order.
    pub dataset_size: usize,
    pub use_ga: bool,
    pub use_ppa: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mdn = MdnConfig::default();
        Self {
            n: mdn.n,
            latent: mdn.latent,
            d_h: mdn.hidden,
            kernel_sizes: mdn.kernel_sizes,
            steps: 10_000,
            batch_size: 2,
            learning_rate: 5e-6,
            beta: 0.5,
            r_temp: 0.5,
            sigma_q: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_interval: 0,
            dataset_size: 20_000,
            use_ga: true,
            use_ppa: true,
        }
    }
}

impl TrainConfig {
    pub fn mdn(&self) -> MdnConfig {
        MdnConfig { n: self.n, latent: self.latent, hidden: self.d_h, kernel_sizes: self.kernel_sizes.clone() }
    }

    pub fn ppa(&self) -> PpaConfig {
        PpaConfig { beta: self.beta, r_temp: self.r_temp, sigma_q: self.sigma_q }
    }

    pub fn validate(&self) -> Result<()> {
        self.mdn().validate()?;
        self.ppa().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps.saturating_mul(self.batch_size) > self.dataset_size {
            return Err(Error::Config(format!(
                "{} steps of batch {} exceed the {}-latent dataset",
                self.steps, self.batch_size, self.dataset_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !self.use_ga && !self.use_ppa {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(rename = "L_GA")]
    pub l_ga: f64,
    #[serde(rename = "L_PPA")]
    pub l_ppa: f64,
    #[serde(rename = "L")]
    pub l: f64,
    /// Missing when a learned direction has collapsed and the loss is not in use.
    #[serde(rename = "C_diag_mean")]
    pub c_diag_mean: Option<f64>,
    #[serde(rename = "C_offdiag_absmean")]
    pub c_offdiag_absmean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub mean: f64,
    pub last: Option<TrainRecord>,
}

impl LossStats {
    fn push(&mut self, rec: &TrainRecord) {
        self.count += 1;
        self.mean += (rec.l - self.mean) / self.count as f64;
        self.last = Some(rec.clone());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Updates applied so far; also the position in the latent dataset.
    pub step: usize,
    pub mdn: Mdn,
    pub adam: AdamState,
    pub stats: LossStats,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mdn = Mdn::init(config.mdn(), derive_seed(config.seed, INIT_STREAM))?;
        let adam = AdamState::new(&mdn.params.values());
        Ok(Self { config, step: 0, mdn, adam, stats: LossStats::default() })
    }

    /// Seed of the latent dataset stream; together with `step` it fixes
    /// every future batch.
    pub fn data_seed(&self) -> u64 {
        derive_seed(self.config.seed, DATA_STREAM)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.set_meta("train.config", serde_json::to_value(&self.config)?);
        c.set_meta("train.step", self.step as u64);
        c.set_meta("train.data_seed", self.data_seed());
        c.set_meta("train.stats", serde_json::to_value(&self.stats)?);
        c.set_meta("adam.t", self.adam.t);
        self.mdn.write_checkpoint(&mut c)?;
        for (i, name) in self.mdn.params.names().iter().enumerate() {
            c.insert(format!("adam.m.{name}"), self.adam.m[i].clone())?;
            c.insert(format!("adam.v.{name}"), self.adam.v[i].clone())?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(
            c.meta("train.config").cloned().ok_or_else(|| Error::Format("missing train.config".into()))?,
        )?;
        config.validate()?;
        let mdn = Mdn::read_checkpoint(c)?;
        if mdn.config != config.mdn() {
            return Err(Error::Format("mdn.config disagrees with train.config".into()));
        }
        let names = mdn.params.names();
        let m = names.iter().map(|n| c.require(&format!("adam.m.{n}")).cloned()).collect::<Result<Vec<_>>>()?;
        let v = names.iter().map(|n| c.require(&format!("adam.v.{n}")).cloned()).collect::<Result<Vec<_>>>()?;
        let stats = match c.meta("train.stats") {
            Some(s) => serde_json::from_value(s.clone())?,
            None => LossStats::default(),
        };
        Ok(Self {
            step: c.meta_u64("train.step")? as usize,
            adam: AdamState { t: c.meta_u64("adam.t")?, m, v },
            mdn,
            stats,
            config,
        })
    }
}

/// Training stopped early. `state` is the last state whose parameters were
/// finite, or `None` when setup failed before any state existed.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub state: Option<Box<TrainState>>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.state {
            Some(s) => write!(f, "training aborted at step {}: {}", s.step, self.error),
            None => write!(f, "training setup failed: {}", self.error),
        }
    }
}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self { error, state: None }
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub enum TrainEvent<'a> {
    Record(&'a TrainRecord),
    /// Emitted every `checkpoint_interval` steps.
    Checkpoint(&'a TrainState),
}

/// Drives training against a generator's pushforward. The generator is only
/// reachable through [`Pushforward`], so attribute labels cannot leak in.
pub struct Trainer<'a, G: Pushforward> {
    generator: &'a G,
    boundaries: &'a BoundarySet,
    latents: Tensor,
}

impl<'a, G: Pushforward> Trainer<'a, G> {
    pub fn new(config: &TrainConfig, generator: &'a G, boundaries: &'a BoundarySet) -> Result<Self> {
        config.validate()?;
        if generator.latent_dim() != config.latent {
            return Err(Error::Dimension(format!(
                "generator latent width {} differs from configured {}",
                generator.latent_dim(),
                config.latent
            )));
        }
        if boundaries.b.shape() != [config.n, config.latent] {
            return Err(Error::Dimension(format!(
                "boundary set has shape {:?}, expected [{}, {}]",
                boundaries.b.shape(),
                config.n,
                config.latent
            )));
        }
        let latents = sample_latents(config.dataset_size, config.latent, derive_seed(config.seed, DATA_STREAM))?;
        Ok(Self { generator, boundaries, latents })
    }

    pub fn latents(&self) -> &Tensor {
        &self.latents
    }

    /// Runs until `state.step == state.config.steps`.
    pub fn run(
        &self,
        mut state: TrainState,
        mut observe: impl FnMut(TrainEvent<'_>),
    ) -> Result<TrainState, TrainAbort> {
        while state.step < state.config.steps {
            match self.step(&mut state) {
                Ok(rec) => observe(TrainEvent::Record(&rec)),
                Err(error) => return Err(TrainAbort { error, state: Some(Box::new(state)) }),
            }
            let every = state.config.checkpoint_interval;
            if every > 0 && state.step.is_multiple_of(every) {
                observe(TrainEvent::Checkpoint(&state));
            }
        }
        Ok(state)
    }

    /// One Adam update on the next batch. On error `state` is unchanged.
    pub fn step(&self, state: &mut TrainState) -> Result<TrainRecord> {
        let cfg = &state.config;
        let batch = cfg.batch_size;
        let z = self.latents.rows(state.step * batch, batch)?;
        let jacobians =
            (0..batch).into_par_iter().map(|r| self.generator.jacobian(&z.rows(r, 1)?)).collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let params = state.mdn.params.map(&mut |_, t| tape.leaf(t.clone()));
        let zc = tape.constant(z);
        let fwd = state.mdn.forward(&mut tape, &params, &zc, Mode::Train)?;

        let ppa_cfg = cfg.ppa();
        let mut terms = Vec::new();
        let (mut ga_sum, mut ppa_sum) = (0.0, 0.0);
        let mut summaries = Vec::with_capacity(batch);
        for (w, j) in fwd.w.iter().zip(&jacobians) {
            if cfg.use_ga {
                let (l, inter) = ga_loss_with(&mut tape, w, &self.boundaries.b, j)?;
                ga_sum += tape.value(&l).item()?;
                summaries.push(Some(AlignmentSummary::of(&inter.c)?));
                terms.push(l);
            } else {
                summaries.push(match ga_loss(tape.value(w), &self.boundaries.b, j) {
                    Ok((l, inter)) => {
                        ga_sum += l;
                        Some(AlignmentSummary::of(&inter.c)?)
                    }
                    Err(Error::DirectionCollapse { .. }) => None,
                    Err(e) => return Err(e),
                });
            }
            let p = ppa_loss_with(&mut tape, w, &ppa_cfg)?;
            ppa_sum += tape.value(&p).item()?;
            if cfg.use_ppa {
                terms.push(p);
            }
        }
        let b = batch as f64;
        let (l_ga, l_ppa) = (ga_sum / b, ppa_sum / b);
        let mut objective = terms[0];
        for t in &terms[1..] {
            objective = tape.add(&objective, t)?;
        }
        let objective = tape.mul_scalar(&objective, 1.0 / b)?;
        let l = total_loss(if cfg.use_ga { l_ga } else { 0.0 }, if cfg.use_ppa { l_ppa } else { 0.0 })?;

        let grads = tape.backward(objective)?;
        let mut flat_grads = Vec::new();
        params.visit(&mut |_, v| flat_grads.push(grads.wrt_or_zeros(&tape, *v)));
        let current = state.mdn.params.values();
        let mut adam = state.adam.clone();
        let updated = adam.step(&cfg.adam, cfg.learning_rate, &current, &flat_grads)?;
        let new_params = state.mdn.params.rebuild(updated)?;

        let mean_of = |f: fn(&AlignmentSummary) -> f64| -> Option<f64> {
            let vals: Option<Vec<f64>> = summaries.iter().map(|s| s.as_ref().map(f)).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let rec = TrainRecord {
            step: state.step + 1,
            l_ga,
            l_ppa,
            l,
            c_diag_mean: mean_of(|s| s.diag_mean),
            c_offdiag_absmean: mean_of(|s| s.offdiag_absmean),
        };
        state.mdn.params = new_params;
        state.mdn.update_running(&fwd.stats);
        state.adam = adam;
        state.step += 1;
        state.stats.push(&rec);
        Ok(rec)
    }
}

/// Fresh state trained for `config.steps` updates.
pub fn train<G: Pushforward>(
    config: TrainConfig,
    generator: &G,
    boundaries: &BoundarySet,
    observe: impl FnMut(TrainEvent<'_>),
) -> Result<TrainState, TrainAbort> {
    let trainer = Trainer::new(&config, generator, boundaries)?;
    trainer.run(TrainState::new(config)?, observe)
}
