//! Semantic boundary vectors: unit normals of per-attribute linear decision
//! hyperplanes in latent space, fitted by L2-regularized logistic regression.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbvConfig {
    pub lambda: f64,
    pub max_steps: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Trailing fraction of the dataset held out for the accuracy check.
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
    pub min_samples: usize,
}

impl Default for SbvConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            max_steps: 10_000,
            tolerance: 1e-6,
            holdout_fraction: 0.2,
            min_accuracy: 0.9,
            min_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub steps: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LogisticFit {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.intercept
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub steps: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySet {
    /// `[n, K]`, unit-norm rows.
    pub b: Tensor,
    /// Intercepts in the unit-normal scaling: the hyperplane is `<b_i, z> + c_i = 0`.
    pub intercepts: Vec<f64>,
    pub diagnostics: Vec<FitDiagnostics>,
}

/// `log(1 + exp(-m))` without overflow.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid_scalar(x)
}

/// Largest eigenvalue of `X~^T X~ / N` where `X~` is `x` with a ones column.
fn gram_spectral_bound(x: &[&[f64]]) -> f64 {
    let d = x[0].len() + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut out = vec![0.0; d];
        for row in x {
            let p = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += p * a;
            }
            out[d - 1] += p;
        }
        let norm = out.iter().map(|o| o * o).sum::<f64>().sqrt() / x.len() as f64;
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        let scale = 1.0 / (norm * x.len() as f64);
        v = out.into_iter().map(|o| o * scale).collect();
        if converged {
            break;
        }
    }
    lambda
}

/// Mean logistic loss plus `lambda/2 |w|^2` (intercept unpenalized), with gradient.
fn objective(x: &[&[f64]], y: &[f64], w: &[f64], c: f64, lambda: f64) -> (f64, Vec<f64>) {
    let d = w.len();
    let n = x.len() as f64;
    let mut grad = vec![0.0; d + 1];
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let m = label * (row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + c);
        loss += softplus_neg(m);
        let coef = -label * sigmoid(-m);
        for (g, a) in grad.iter_mut().zip(row.iter()) {
            *g += coef * a;
        }
        grad[d] += coef;
    }
    for (j, g) in grad.iter_mut().enumerate() {
        *g /= n;
        if j < d {
            *g += lambda * w[j];
        }
    }
    loss = loss / n + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    (loss, grad)
}

/// Logistic regression on rows of `x` with labels `y` in `{-1, +1}`.
///
/// Accelerated gradient descent with step `1/L` (`L` bounds the gradient's
/// Lipschitz constant) and a monotone restart, starting from zero.
pub fn fit_logistic(x: &[&[f64]], y: &[f64], lambda: f64, max_steps: usize, tolerance: f64) -> Result<LogisticFit> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Argument(format!("{} rows with {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("ragged design matrix".into()));
    }
    if !y.iter().any(|&l| l > 0.0) || !y.iter().any(|&l| l < 0.0) {
        return Err(Error::DegenerateData("labels contain a single class".into()));
    }
    let step = 1.0 / (0.25 * gram_spectral_bound(x) + lambda);
    let mut theta = vec![0.0; d + 1];
    let mut prev = theta.clone();
    let mut momentum_t = 1.0f64;
    let mut last_loss = f64::INFINITY;
    let mut grad_norm = f64::INFINITY;
    let mut steps = 0;
    while steps < max_steps {
        let (_, g_at_theta) = objective(x, y, &theta[..d], theta[d], lambda);
        grad_norm = g_at_theta.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < tolerance {
            break;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum_t * momentum_t).sqrt());
        let beta = (momentum_t - 1.0) / t_next;
        let look: Vec<f64> = theta.iter().zip(&prev).map(|(a, b)| a + beta * (a - b)).collect();
        let (_, g) = objective(x, y, &look[..d], look[d], lambda);
        let next: Vec<f64> = look.iter().zip(&g).map(|(a, g)| a - step * g).collect();
        let (loss, _) = objective(x, y, &next[..d], next[d], lambda);
        steps += 1;
        if loss > last_loss {
            // restart momentum from a plain gradient step
            momentum_t = 1.0;
            prev = theta.clone();
            theta = theta.iter().zip(&g_at_theta).map(|(a, g)| a - step * g).collect();
            last_loss = objective(x, y, &theta[..d], theta[d], lambda).0;
            continue;
        }
        prev = std::mem::replace(&mut theta, next);
        momentum_t = t_next;
        last_loss = loss;
    }
    let converged = grad_norm < tolerance;
    let intercept = theta.pop().expect("intercept slot");
    Ok(LogisticFit { weights: theta, intercept, steps, grad_norm, converged })
}

fn accuracy(fit: &LogisticFit, x: &[&[f64]], y: &[f64]) -> f64 {
    let hits = x.iter().zip(y).filter(|(r, &l)| fit.margin(r) * l > 0.0).count();
    hits as f64 / x.len().max(1) as f64
}

/// Fits one boundary per attribute; attributes are fitted concurrently.
pub fn fit_boundaries(data: &LabeledDataset, cfg: &SbvConfig) -> Result<BoundarySet> {
    let n = data.attributes();
    let total = data.len();
    if n == 0 {
        return Err(Error::Argument("dataset has no attributes".into()));
    }
    if total < cfg.min_samples {
        return Err(Error::DegenerateData(format!(
            "{total} samples, at least {} required per attribute",
            cfg.min_samples
        )));
    }
    let held = ((total as f64) * cfg.holdout_fraction).round() as usize;
    let split = total - held;
    let rows: Vec<&[f64]> = (0..total).map(|r| data.z.row_slice(r)).collect();
    let (train_x, test_x) = rows.split_at(split);

    let fits = (0..n)
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = data.labels.iter().map(|l| f64::from(l[i])).collect();
            let (train_y, test_y) = y.split_at(split);
            let fit = fit_logistic(train_x, train_y, cfg.lambda, cfg.max_steps, cfg.tolerance)
                .map_err(|e| match e {
                    Error::DegenerateData(m) => Error::DegenerateData(format!("attribute {i}: {m}")),
                    other => other,
                })?;
            let train_accuracy = accuracy(&fit, train_x, train_y);
            let diag = FitDiagnostics {
                train_accuracy,
                // without a held-out split the training accuracy stands in
                holdout_accuracy: if held > 0 { accuracy(&fit, test_x, test_y) } else { train_accuracy },
                steps: fit.steps,
                grad_norm: fit.grad_norm,
                converged: fit.converged,
            };
            if !fit.converged {
                log::warn!(
                    "attribute {i}: logistic fit stopped after {} steps with gradient norm {:.3e} (train accuracy {:.4})",
                    fit.steps,
                    fit.grad_norm,
                    diag.train_accuracy
                );
            }
            if diag.holdout_accuracy < cfg.min_accuracy {
                return Err(Error::FitFailed(format!(
                    "attribute {i}: held-out accuracy {:.4} below {}",
                    diag.holdout_accuracy,
                    cfg.min_accuracy
                )));
            }
            Ok((fit, diag))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut b = Vec::with_capacity(n);
    let mut intercepts = Vec::with_capacity(n);
    let mut diagnostics = Vec::with_capacity(n);
    for (i, (fit, diag)) in fits.into_iter().enumerate() {
        let norm = fit.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DirectionCollapse { kind: "boundary", index: i, norm });
        }
        b.push(fit.weights.iter().map(|w| w / norm).collect::<Vec<_>>());
        intercepts.push(fit.intercept / norm);
        diagnostics.push(diag);
    }
    Ok(BoundarySet { b: Tensor::from_rows(&b)?, intercepts, diagnostics })
}

impl BoundarySet {
    pub fn n(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn write_checkpoint(&self, c: &mut Checkpoint) -> Result<()> {
        c.insert("sbv.B", self.b.clone())?;
        c.insert("sbv.intercepts", Tensor::row(self.intercepts.clone())?)?;
        c.set_meta("sbv.diagnostics", serde_json::to_value(&self.diagnostics)?);
        Ok(())
    }

    pub fn read_checkpoint(c: &Checkpoint) -> Result<Self> {
        let b = c.require("sbv.B")?.clone();
        let (n, _) = b.dims2()?;
        for i in 0..n {
            let norm = b.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(Error::Format(format!("sbv.B row {i} has norm {norm}")));
            }
        }
        let intercepts = c.require("sbv.intercepts")?.data().to_vec();
        if intercepts.len() != n {
            return Err(Error::Format("sbv.intercepts length differs from sbv.B rows".into()));
        }
        let diagnostics = match c.meta("sbv.diagnostics") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Vec::new(),
        };
        Ok(Self { b, intercepts, diagnostics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_latents;
    use crate::generator::{GeneratorConfig, GeneratorModel};

    fn dataset(count: usize) -> (GeneratorModel, LabeledDataset) {
        let g = GeneratorModel::init(GeneratorConfig::default(), 21).unwrap();
        let z = sample_latents(count, 16, 22).unwrap();
        let ds = LabeledDataset::label(&g, z).unwrap();
        (g, ds)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn symmetric_one_dimensional_toy() {
        let x: Vec<&[f64]> = vec![&[-1.0], &[1.0]];
        let fit = fit_logistic(&x, &[-1.0, 1.0], 1e-4, 10_000, 1e-6).unwrap();
        assert!(fit.weights[0] > 0.0);
        assert!(fit.intercept.abs() < 1e-9);
    }

    #[test]
    fn recovers_ground_truth_directions() {
        let (g, ds) = dataset(4000);
        let sbv = fit_boundaries(&ds, &SbvConfig::default()).unwrap();
        for i in 0..4 {
            let bi = sbv.b.row_slice(i);
            assert!((dot(bi, bi) - 1.0).abs() < 1e-10);
            assert!(dot(bi, g.factors().row_slice(i)).abs() >= 0.95);
            for j in (0..4).filter(|&j| j != i) {
                assert!(dot(bi, g.factors().row_slice(j)).abs() <= 0.15);
            }
            assert!(sbv.diagnostics[i].holdout_accuracy >= 0.9);
        }
    }

    #[test]
    fn flipping_labels_flips_one_row() {
        let (_, ds) = dataset(1000);
        let cfg = SbvConfig { max_steps: 2000, ..Default::default() };
        let base = fit_boundaries(&ds, &cfg).unwrap();
        let mut flipped = ds.clone();
        flipped.labels.iter_mut().for_each(|l| l[2] = -l[2]);
        let other = fit_boundaries(&flipped, &cfg).unwrap();
        for i in 0..4 {
            let sign = if i == 2 { -1.0 } else { 1.0 };
            for (a, b) in base.b.row_slice(i).iter().zip(other.b.row_slice(i)) {
                assert!((a - sign * b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let (_, mut ds) = dataset(300);
        assert!(matches!(
            fit_boundaries(&ds, &SbvConfig { min_samples: 400, ..Default::default() }),
            Err(Error::DegenerateData(_))
        ));
        ds.labels.iter_mut().for_each(|l| l[1] = 1);
        assert!(matches!(fit_boundaries(&ds, &SbvConfig::default()), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn checkpoint_sections() {
        let (_, ds) = dataset(500);
        let sbv = fit_boundaries(&ds, &SbvConfig { max_steps: 500, ..Default::default() }).unwrap();
        let mut c = Checkpoint::new();
        sbv.write_checkpoint(&mut c).unwrap();
        let back = BoundarySet::read_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, sbv);
    }
}
