//! Geometry-aware alignment loss through the generator Jacobian, the
//! temperature-scaled KL prior loss, and their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, TensorOps};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column norms below this count as collapsed directions.
pub const COLLAPSE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaIntermediates {
    /// `J W^T`, `[F, n]`.
    pub u: Tensor,
    /// `J B^T`, `[F, n]`.
    pub v: Tensor,
    /// Column norms of `U` and `V` (the diagonals of `D_U`, `D_V`).
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub u_hat: Tensor,
    pub v_hat: Tensor,
    /// `U_hat^T V_hat`, `[n, n]`.
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub diag_mean: f64,
    pub offdiag_absmean: f64,
}

impl AlignmentSummary {
    pub fn of(c: &Tensor) -> Result<Self> {
        let (n, m) = c.dims2()?;
        if n != m {
            return Err(Error::Dimension(format!("cross matrix is {n}x{m}")));
        }
        let diag = (0..n).map(|i| c.at(i, i)).sum::<f64>() / n as f64;
        let off = if n > 1 {
            let total: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| c.at(i, j).abs())
                .sum();
            total / (n * (n - 1)) as f64
        } else {
            0.0
        };
        Ok(Self { diag_mean: diag, offdiag_absmean: off })
    }
}

/// `J R^T` with unit columns; returns the product, its column norms, and the
/// normalized product.
fn normalized_pushforward<O: TensorOps>(
    ops: &mut O,
    j: &O::V,
    rows: &O::V,
    kind: &'static str,
) -> Result<(O::V, Vec<f64>, O::V)> {
    let rt = ops.transpose(rows)?;
    let p = ops.matmul(j, &rt)?;
    let sq = ops.square(&p)?;
    let sums = ops.sum_axis(&sq, 0)?;
    let norms = ops.sqrt(&sums)?;
    let values = ops.value(&norms).data().to_vec();
    if let Some((index, &norm)) = values.iter().enumerate().find(|(_, &v)| v.is_nan() || v < COLLAPSE_NORM) {
        return Err(Error::DirectionCollapse { kind, index, norm });
    }
    let one = ops.constant(Tensor::scalar(1.0));
    let inv = ops.div(&one, &norms)?;
    let hat = ops.scale_cols(&p, &inv)?;
    Ok((p, values, hat))
}

/// `|U_hat^T V_hat - I|_F^2` for one latent. `w` and `b` are `[n, K]`,
/// `j` is `[F, K]`; only `w` carries gradients.
pub fn ga_loss_with<O: TensorOps>(ops: &mut O, w: &O::V, b: &Tensor, j: &Tensor) -> Result<(O::V, GaIntermediates)> {
    let (n, k) = ops.value(w).dims2()?;
    let (nb, kb) = b.dims2()?;
    let (_, kj) = j.dims2()?;
    if n != nb || k != kb || k != kj {
        return Err(Error::Dimension(format!("W is {n}x{k}, B is {nb}x{kb}, J has {kj} columns")));
    }
    let (v, dv, v_hat) = normalized_pushforward(&mut Eval, j, b, "boundary")?;
    let jc = ops.constant(j.clone());
    let (u, du, u_hat) = normalized_pushforward(ops, &jc, w, "semantic")?;
    let vc = ops.constant(v_hat.clone());
    let ut = ops.transpose(&u_hat)?;
    let c = ops.matmul(&ut, &vc)?;
    let eye = ops.constant(Tensor::eye(n));
    let diff = ops.sub(&c, &eye)?;
    let sq = ops.square(&diff)?;
    let loss = ops.sum(&sq)?;
    let inter = GaIntermediates {
        u: ops.value(&u).clone(),
        v,
        du,
        dv,
        u_hat: ops.value(&u_hat).clone(),
        v_hat,
        c: ops.value(&c).clone(),
    };
    Ok((loss, inter))
}

pub fn ga_loss(w: &Tensor, b: &Tensor, j: &Tensor) -> Result<(f64, GaIntermediates)> {
    let (l, inter) = ga_loss_with(&mut Eval, w, b, j)?;
    Ok((l.item()?, inter))
}

/// Cross-alignment matrix `C` and its diagonal / off-diagonal summary.
pub fn cross_alignment_report(w: &Tensor, b: &Tensor, j: &Tensor) -> Result<(Tensor, AlignmentSummary)> {
    let (_, inter) = ga_loss(w, b, j)?;
    let summary = AlignmentSummary::of(&inter.c)?;
    Ok((inter.c, summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpaConfig {
    pub beta: f64,
    pub r_temp: f64,
    pub sigma_q: f64,
}

impl Default for PpaConfig {
    fn default() -> Self {
        Self { beta: 0.5, r_temp: 0.5, sigma_q: 1.0 }
    }
}

impl PpaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("r_temp", self.r_temp), ("sigma_q", self.sigma_q)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(beta / n)(1 / r) sum_i KL(N(w_i, s^2 I) || N(0, I))` for one `[n, K]` matrix.
pub fn ppa_loss_with<O: TensorOps>(ops: &mut O, w: &O::V, cfg: &PpaConfig) -> Result<O::V> {
    cfg.validate()?;
    let (n, k) = ops.value(w).dims2()?;
    let s2 = cfg.sigma_q * cfg.sigma_q;
    let kf = k as f64;
    // per-row KL = 0.5 (K s^2 + |w_i|^2 - K - K ln s^2)
    let constant = n as f64 * 0.5 * (kf * s2 - kf - kf * s2.ln());
    let sq = ops.square(w)?;
    let total = ops.sum(&sq)?;
    let kl = ops.mul_scalar(&total, 0.5)?;
    let kl = ops.add_scalar(&kl, constant)?;
    ops.mul_scalar(&kl, cfg.beta / n as f64 / cfg.r_temp)
}

pub fn ppa_loss(w: &Tensor, cfg: &PpaConfig) -> Result<f64> {
    ppa_loss_with(&mut Eval, w, cfg)?.item()
}

/// `L = L_GA + L_PPA`; both terms must be finite.
pub fn total_loss(ga: f64, ppa: f64) -> Result<f64> {
    if !ga.is_finite() || !ppa.is_finite() {
        return Err(Error::NonFinite(format!("total loss (L_GA = {ga}, L_PPA = {ppa})")));
    }
    Ok(ga + ppa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{assert_close, numeric_grad};
    use crate::autodiff::Tape;
    use crate::init::{gaussian, orthonormal_rows, seeded};

    /// Direct dense transcription of the alignment loss.
    fn oracle(w: &Tensor, b: &Tensor, j: &Tensor) -> f64 {
        let (f, k) = j.dims2().unwrap();
        let n = w.shape()[0];
        let push = |m: &Tensor| -> Vec<Vec<f64>> {
            (0..n)
                .map(|c| {
                    let col: Vec<f64> = (0..f).map(|r| (0..k).map(|t| j.at(r, t) * m.at(c, t)).sum()).collect();
                    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                    col.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        };
        let (u, v) = (push(w), push(b));
        let mut loss = 0.0;
        for a in 0..n {
            for c in 0..n {
                let dot: f64 = u[a].iter().zip(&v[c]).map(|(x, y)| x * y).sum();
                let target = if a == c { 1.0 } else { 0.0 };
                loss += (dot - target).powi(2);
            }
        }
        loss
    }

    #[test]
    fn identity_alignment_is_zero() {
        let b = orthonormal_rows(&mut seeded(1), 4, 16).unwrap();
        let (l, inter) = ga_loss(&b, &b, &Tensor::eye(16)).unwrap();
        assert!(l.abs() < 1e-12);
        let s = AlignmentSummary::of(&inter.c).unwrap();
        assert!((s.diag_mean - 1.0).abs() < 1e-12 && s.offdiag_absmean < 1e-12);
    }

    #[test]
    fn swapped_rows_give_four() {
        let b = orthonormal_rows(&mut seeded(2), 2, 5).unwrap();
        let w = Tensor::from_rows(&[b.row_slice(1).to_vec(), b.row_slice(0).to_vec()]).unwrap();
        let (l, inter) = ga_loss(&w, &b, &Tensor::eye(5)).unwrap();
        assert!((l - 4.0).abs() < 1e-9);
        assert!(inter.c.max_abs_diff(&Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn matches_transcription_and_invariants() {
        let mut rng = seeded(3);
        for _ in 0..5 {
            let w = gaussian(&mut rng, &[4, 16], 1.0);
            let b = gaussian(&mut rng, &[4, 16], 1.0);
            let j = gaussian(&mut rng, &[64, 16], 0.3);
            let (l, inter) = ga_loss(&w, &b, &j).unwrap();
            assert!((l - oracle(&w, &b, &j)).abs() < 1e-10);
            assert!(inter.c.data().iter().all(|c| c.abs() <= 1.0 + 1e-9));
            for m in [&inter.u_hat, &inter.v_hat] {
                for c in 0..4 {
                    let norm = (0..64).map(|r| m.at(r, c).powi(2)).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-10);
                }
            }
            for row in 0..4 {
                for c in [0.5, 2.0, 10.0] {
                    let mut scaled = w.clone();
                    scaled.data_mut()[row * 16..(row + 1) * 16].iter_mut().for_each(|x| *x *= c);
                    assert!((ga_loss(&scaled, &b, &j).unwrap().0 - l).abs() < 1e-9);
                    let mut sb = b.clone();
                    sb.data_mut()[row * 16..(row + 1) * 16].iter_mut().for_each(|x| *x *= c);
                    assert!((ga_loss(&w, &sb, &j).unwrap().0 - l).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded(4);
        let w = gaussian(&mut rng, &[3, 6], 1.0);
        let b = gaussian(&mut rng, &[3, 6], 1.0);
        let j = gaussian(&mut rng, &[8, 6], 1.0);
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let (l, _) = ga_loss_with(&mut tape, &wv, &b, &j).unwrap();
        let g = tape.backward(l).unwrap();
        let numeric = numeric_grad(&w, 1e-5, |x| ga_loss(x, &b, &j).unwrap().0);
        assert_close(g.wrt(wv).unwrap().data(), &numeric, 1e-5);
    }

    #[test]
    fn collapse_names_the_attribute() {
        let mut w = gaussian(&mut seeded(5), &[3, 4], 1.0);
        w.data_mut()[4..8].iter_mut().for_each(|x| *x = 0.0);
        let b = gaussian(&mut seeded(6), &[3, 4], 1.0);
        match ga_loss(&w, &b, &Tensor::eye(4)) {
            Err(Error::DirectionCollapse { kind: "semantic", index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match ga_loss(&b, &w, &Tensor::eye(4)) {
            Err(Error::DirectionCollapse { kind: "boundary", index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ppa_closed_forms() {
        let cfg = PpaConfig::default();
        assert_eq!(ppa_loss(&Tensor::zeros(&[4, 16]), &cfg).unwrap(), 0.0);
        let mut unit = vec![0.0; 7];
        unit[3] = 1.0;
        let w = Tensor::row(unit).unwrap();
        assert!((ppa_loss(&w, &cfg).unwrap() - 0.5).abs() < 1e-12);
        let w = gaussian(&mut seeded(7), &[4, 16], 1.0);
        let base = ppa_loss(&w, &PpaConfig { r_temp: 1.0, ..cfg }).unwrap();
        for r in [0.1, 0.3, 0.5, 1.0, 3.0] {
            let l = ppa_loss(&w, &PpaConfig { r_temp: r, ..cfg }).unwrap();
            assert!((l * r - base).abs() < 1e-12 * base);
        }
        let grow: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&c| ppa_loss(&w.scale(c), &cfg).unwrap()).collect();
        assert!(grow[0] < grow[1] && grow[1] < grow[2]);
        assert!(PpaConfig { r_temp: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn total_is_a_checked_sum() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(4.0, 0.5).unwrap(), 4.5);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::NonFinite(_))));
        assert!(matches!(total_loss(1.0, f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = seeded(8);
        let w = gaussian(&mut rng, &[4, 16], 1.0);
        let b = gaussian(&mut rng, &[4, 16], 1.0);
        let j = gaussian(&mut rng, &[64, 16], 0.3);
        let cfg = PpaConfig::default();
        let grad = |use_ga: bool, use_ppa: bool| {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let mut terms = Vec::new();
            if use_ga {
                terms.push(ga_loss_with(&mut tape, &wv, &b, &j).unwrap().0);
            }
            if use_ppa {
                terms.push(ppa_loss_with(&mut tape, &wv, &cfg).unwrap());
            }
            let l = if terms.len() == 2 { tape.add(&terms[0], &terms[1]).unwrap() } else { terms[0] };
            tape.backward(l).unwrap().wrt(wv).unwrap().clone()
        };
        let both = grad(true, true);
        let sum = grad(true, false).add(&grad(false, true)).unwrap();
        assert!(both.max_abs_diff(&sum) < 1e-10);
    }
}
