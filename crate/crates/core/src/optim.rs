//! Adam with bias correction over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    /// Returns updated parameters; the moments advance in place. Nothing is
    /// modified if the update would produce a non-finite value.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let t = self.t + 1;
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        let mut new_m = Vec::with_capacity(params.len());
        let mut new_v = Vec::with_capacity(params.len());
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m: Vec<f64> =
                self.m[i].data().iter().zip(g.data()).map(|(m, g)| cfg.beta1 * m + (1.0 - cfg.beta1) * g).collect();
            let v: Vec<f64> =
                self.v[i].data().iter().zip(g.data()).map(|(v, g)| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g).collect();
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(m.iter().zip(&v))
                .map(|(x, (m, v))| x - lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
                .collect();
            let shape = p.shape().to_vec();
            out.push(
                Tensor::new(shape.clone(), data)
                    .map_err(|_| Error::NonFinite(format!("Adam update of parameter {i}")))?,
            );
            new_m.push(Tensor::new(shape.clone(), m)?);
            new_v.push(Tensor::new(shape, v)?);
        }
        self.t = t;
        self.m = new_m;
        self.v = new_v;
        Ok(out)
    }
}
