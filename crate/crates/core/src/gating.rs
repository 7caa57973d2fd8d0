//! Gating network: one GRU step from a zero hidden state, followed by
//! self-attention over expert-aligned slices of the hidden state.
//!
//! The hidden state `h` (width `d_h`) is split into `n` tokens of width
//! `d_t = d_h / n`. Token `i` attends over all tokens, and its attended output
//! is projected by `P_g` and squashed with a sigmoid to give the gate `a_i`.
//! Gates are independent sigmoids, so several experts can be active at once.

use crate::autodiff::TensorOps;
use crate::error::{Error, Result};
use crate::init::{uniform, SeededRng};
use crate::tensor::Tensor;

/// GRU weights. `W_*` map the latent (`d_h x K`), `U_*` map the previous
/// hidden state (`d_h x d_h`); `W_h` acts on the update gate, so it is
/// `d_h x d_h` as well. Biases are `[1, d_h]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<V> {
    pub w_r: V,
    pub u_r: V,
    pub w_u: V,
    pub u_u: V,
    pub w_h: V,
    pub u_h: V,
    pub b_r: V,
    pub b_u: V,
    pub b_h: V,
}

/// Attention weights. Projections are `d_k x d_t`, biases `[1, d_k]`, and the
/// gate projection `P_g` is `[1, d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<V> {
    pub w_q: V,
    pub w_k: V,
    pub w_v: V,
    pub b_q: V,
    pub b_k: V,
    pub b_v: V,
    pub p_g: V,
}

macro_rules! param_struct_impl {
    ($ty:ident, $prefix:literal, { $($field:ident => $name:literal),* $(,)? }) => {
        impl<V> $ty<V> {
            pub fn map<U>(&self, f: &mut impl FnMut(&str, &V) -> U) -> $ty<U> {
                $ty { $($field: f(concat!($prefix, $name), &self.$field)),* }
            }

            pub fn visit(&self, f: &mut impl FnMut(&str, &V)) {
                $(f(concat!($prefix, $name), &self.$field);)*
            }
        }
    };
}

param_struct_impl!(GruParams, "gating.gru.", {
    w_r => "W_r", u_r => "U_r", w_u => "W_u", u_u => "U_u", w_h => "W_h", u_h => "U_h",
    b_r => "b_r", b_u => "b_u", b_h => "b_h",
});

param_struct_impl!(AttentionParams, "gating.attn.", {
    w_q => "W_Q", w_k => "W_K", w_v => "W_V", b_q => "b_Q", b_k => "b_K", b_v => "b_V", p_g => "P_g",
});

impl GruParams<Tensor> {
    pub fn init(rng: &mut SeededRng, latent: usize, hidden: usize) -> Self {
        let bx = 1.0 / (latent as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        Self {
            w_r: uniform(rng, &[hidden, latent], bx),
            u_r: uniform(rng, &[hidden, hidden], bh),
            w_u: uniform(rng, &[hidden, latent], bx),
            u_u: uniform(rng, &[hidden, hidden], bh),
            w_h: uniform(rng, &[hidden, hidden], bh),
            u_h: uniform(rng, &[hidden, hidden], bh),
            b_r: uniform(rng, &[1, hidden], bx),
            b_u: uniform(rng, &[1, hidden], bx),
            b_h: uniform(rng, &[1, hidden], bh),
        }
    }

    pub fn zeros(latent: usize, hidden: usize) -> Self {
        Self {
            w_r: Tensor::zeros(&[hidden, latent]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            w_u: Tensor::zeros(&[hidden, latent]),
            u_u: Tensor::zeros(&[hidden, hidden]),
            w_h: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_r: Tensor::zeros(&[1, hidden]),
            b_u: Tensor::zeros(&[1, hidden]),
            b_h: Tensor::zeros(&[1, hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_r.shape()[0]
    }

    pub fn latent(&self) -> usize {
        self.w_r.shape()[1]
    }
}

impl AttentionParams<Tensor> {
    pub fn init(rng: &mut SeededRng, token: usize, key: usize) -> Self {
        let bt = 1.0 / (token as f64).sqrt();
        let bk = 1.0 / (key as f64).sqrt();
        Self {
            w_q: uniform(rng, &[key, token], bt),
            w_k: uniform(rng, &[key, token], bt),
            w_v: uniform(rng, &[key, token], bt),
            b_q: uniform(rng, &[1, key], bt),
            b_k: uniform(rng, &[1, key], bt),
            b_v: uniform(rng, &[1, key], bt),
            p_g: uniform(rng, &[1, key], bk),
        }
    }

    pub fn zeros(token: usize, key: usize) -> Self {
        Self {
            w_q: Tensor::zeros(&[key, token]),
            w_k: Tensor::zeros(&[key, token]),
            w_v: Tensor::zeros(&[key, token]),
            b_q: Tensor::zeros(&[1, key]),
            b_k: Tensor::zeros(&[1, key]),
            b_v: Tensor::zeros(&[1, key]),
            p_g: Tensor::zeros(&[1, key]),
        }
    }
}

/// Gate weights for one latent.
#[derive(Clone, Debug)]
pub struct GateOutput<V> {
    /// `[1, n]`, each entry in (0, 1).
    pub a: V,
    /// `[1, d_h]` GRU hidden state.
    pub h: V,
    /// `[n, n]` row-stochastic attention weights.
    pub attention: V,
}

/// One GRU step from `h_init = 0` for a `[B, K]` batch of latents; returns `[B, d_h]`.
pub fn gru_step<O: TensorOps>(ops: &mut O, z: &O::V, p: &GruParams<O::V>) -> Result<O::V> {
    let (batch, latent) = ops.value(z).dims2()?;
    let (hidden, wk) = ops.value(&p.w_r).dims2()?;
    if wk != latent {
        return Err(Error::Dimension(format!("latent width {latent} but W_r expects {wk}")));
    }
    let h_init = ops.constant(Tensor::zeros(&[batch, hidden]));

    let gate = |ops: &mut O, w: &O::V, u: &O::V, b: &O::V, x: &O::V, h: &O::V| -> Result<O::V> {
        let wt = ops.transpose(w)?;
        let ut = ops.transpose(u)?;
        let xw = ops.matmul(x, &wt)?;
        let hu = ops.matmul(h, &ut)?;
        let s = ops.add(&xw, &hu)?;
        ops.add_bias(&s, b)
    };

    let r = gate(ops, &p.w_r, &p.u_r, &p.b_r, z, &h_init)?;
    let r = ops.sigmoid(&r)?;
    let u = gate(ops, &p.w_u, &p.u_u, &p.b_u, z, &h_init)?;
    let u = ops.sigmoid(&u)?;
    let rh = ops.mul(&r, &h_init)?;
    let cand = gate(ops, &p.w_h, &p.u_h, &p.b_h, &u, &rh)?;
    let cand = ops.tanh(&cand)?;
    // h = (1 - u) * h_init + u * cand
    let neg_u = ops.mul_scalar(&u, -1.0)?;
    let keep = ops.add_scalar(&neg_u, 1.0)?;
    let carried = ops.mul(&keep, &h_init)?;
    let fresh = ops.mul(&u, &cand)?;
    ops.add(&carried, &fresh)
}

/// Attention gates for a single `[1, d_h]` hidden state.
pub fn attention_gates<O: TensorOps>(
    ops: &mut O,
    h: &O::V,
    p: &AttentionParams<O::V>,
    n: usize,
) -> Result<GateOutput<O::V>> {
    let (_, hidden) = ops.value(h).dims2()?;
    if n == 0 || hidden % n != 0 {
        return Err(Error::Config(format!("hidden width {hidden} is not divisible by {n} experts")));
    }
    let token = hidden / n;
    let (key, wt) = ops.value(&p.w_q).dims2()?;
    if wt != token {
        return Err(Error::Dimension(format!("token width {token} but W_Q expects {wt}")));
    }
    let tokens = ops.reshape(h, &[n, token])?;
    let project = |ops: &mut O, w: &O::V, b: &O::V| -> Result<O::V> {
        let wt = ops.transpose(w)?;
        let x = ops.matmul(&tokens, &wt)?;
        ops.add_bias(&x, b)
    };
    let q = project(ops, &p.w_q, &p.b_q)?;
    let k = project(ops, &p.w_k, &p.b_k)?;
    let v = project(ops, &p.w_v, &p.b_v)?;
    let kt = ops.transpose(&k)?;
    let scores = ops.matmul(&q, &kt)?;
    let scores = ops.mul_scalar(&scores, 1.0 / (key as f64).sqrt())?;
    let attention = ops.softmax(&scores, 1)?;
    let attended = ops.matmul(&attention, &v)?;
    let pgt = ops.transpose(&p.p_g)?;
    let logits = ops.matmul(&attended, &pgt)?;
    let logits = ops.transpose(&logits)?;
    let a = ops.sigmoid(&logits)?;
    Ok(GateOutput { a, h: h.clone(), attention })
}

pub type GateBatch<V> = (V, Vec<GateOutput<V>>);

/// Gates for a `[B, K]` batch; returns `[B, n]` gate weights and per-row outputs.
pub fn gate_batch<O: TensorOps>(
    ops: &mut O,
    z: &O::V,
    gru: &GruParams<O::V>,
    attn: &AttentionParams<O::V>,
    n: usize,
) -> Result<GateBatch<O::V>> {
    let h = gru_step(ops, z, gru)?;
    let (batch, _) = ops.value(&h).dims2()?;
    let mut outs = Vec::with_capacity(batch);
    for b in 0..batch {
        let hb = ops.slice_rows(&h, b, 1)?;
        outs.push(attention_gates(ops, &hb, attn, n)?);
    }
    let rows: Vec<O::V> = outs.iter().map(|g| g.a.clone()).collect();
    let a = ops.concat_rows(&rows)?;
    Ok((a, outs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{assert_close, numeric_grad};
    use crate::autodiff::{Eval, Tape};
    use crate::init::seeded;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
        let (r, c) = m.dims2().unwrap();
        (0..r).map(|i| (0..c).map(|j| m.at(i, j) * x[j]).sum()).collect()
    }

    /// Step-by-step transcription of the GRU equations with h_init = 0.
    fn gru_oracle(z: &[f64], p: &GruParams<Tensor>) -> Vec<f64> {
        let d = p.hidden();
        let h0 = vec![0.0; d];
        let r: Vec<f64> =
            (0..d).map(|i| sig(matvec(&p.w_r, z)[i] + matvec(&p.u_r, &h0)[i] + p.b_r.data()[i])).collect();
        let u: Vec<f64> =
            (0..d).map(|i| sig(matvec(&p.w_u, z)[i] + matvec(&p.u_u, &h0)[i] + p.b_u.data()[i])).collect();
        let rh: Vec<f64> = r.iter().zip(&h0).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> =
            (0..d).map(|i| (matvec(&p.w_h, &u)[i] + matvec(&p.u_h, &rh)[i] + p.b_h.data()[i]).tanh()).collect();
        (0..d).map(|i| (1.0 - u[i]) * h0[i] + u[i] * cand[i]).collect()
    }

    /// Scripted attention: tokens, Q/K/V, scaled scores, softmax, weighted sum, gate.
    fn attention_oracle(h: &[f64], p: &AttentionParams<Tensor>, n: usize) -> Vec<f64> {
        let dt = h.len() / n;
        let dk = p.w_q.shape()[0];
        let toks: Vec<&[f64]> = h.chunks(dt).collect();
        let proj = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            toks.iter().map(|t| matvec(w, t).iter().zip(b.data()).map(|(x, y)| x + y).collect()).collect()
        };
        let (q, k, v) = (proj(&p.w_q, &p.b_q), proj(&p.w_k, &p.b_k), proj(&p.w_v, &p.b_v));
        (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..n)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                let out: Vec<f64> = (0..dk).map(|c| (0..n).map(|j| e[j] / tot * v[j][c]).sum()).collect();
                sig(out.iter().zip(p.p_g.data()).map(|(a, b)| a * b).sum())
            })
            .collect()
    }

    #[test]
    fn zero_gru_gives_zero_hidden_state() {
        let p = GruParams::zeros(3, 4);
        let z = Tensor::from_rows(&[vec![1.0, -5.0, 2.0], vec![0.3, 0.0, 9.0]]).unwrap();
        let h = gru_step(&mut Eval, &z, &p).unwrap();
        assert_eq!(h.shape(), &[2, 4]);
        assert!(h.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_set_gru_matches_oracle() {
        let p = GruParams {
            w_r: Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.3]]).unwrap(),
            u_r: Tensor::from_rows(&[vec![0.7, 0.0], vec![-0.4, 0.2]]).unwrap(),
            w_u: Tensor::from_rows(&[vec![-0.3, 0.8], vec![0.6, 0.1]]).unwrap(),
            u_u: Tensor::from_rows(&[vec![0.2, 0.2], vec![0.9, -0.9]]).unwrap(),
            w_h: Tensor::from_rows(&[vec![1.1, -0.5], vec![0.25, 0.75]]).unwrap(),
            u_h: Tensor::from_rows(&[vec![0.3, 0.3], vec![-0.1, 0.4]]).unwrap(),
            b_r: Tensor::row(vec![0.05, -0.05]).unwrap(),
            b_u: Tensor::row(vec![0.1, 0.2]).unwrap(),
            b_h: Tensor::row(vec![-0.3, 0.15]).unwrap(),
        };
        let z = [0.8, -1.3];
        let h = gru_step(&mut Eval, &Tensor::row(z.to_vec()).unwrap(), &p).unwrap();
        let expect = gru_oracle(&z, &p);
        for (a, b) in h.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = seeded(21);
        let p = GruParams::init(&mut rng, 3, 4);
        let z = crate::init::gaussian(&mut rng, &[2, 3], 1.0);
        let mut tape = Tape::new();
        let bound = p.map(&mut |_, t| tape.leaf(t.clone()));
        let zv = tape.constant(z.clone());
        let h = gru_step(&mut tape, &zv, &bound).unwrap();
        let s = tape.sum(&h).unwrap();
        let g = tape.backward(s).unwrap();
        let mut vars = Vec::new();
        bound.visit(&mut |_, v| vars.push(*v));
        for idx in 0..vars.len() {
            let analytic = g.wrt_or_zeros(&tape, vars[idx]);
            let numeric = {
                let mut flat = Vec::new();
                p.visit(&mut |_, t| flat.push(t.clone()));
                numeric_grad(&flat[idx], 1e-5, |x| {
                    let mut i = 0;
                    let q = p.map(&mut |_, t| {
                        let out = if i == idx { x.clone() } else { t.clone() };
                        i += 1;
                        out
                    });
                    gru_step(&mut Eval, &z, &q).unwrap().data().iter().sum()
                })
            };
            assert_close(analytic.data(), &numeric, 1e-5);
        }
    }

    #[test]
    fn zero_attention_gives_half_gates() {
        let p = AttentionParams::zeros(2, 2);
        let h = Tensor::row(vec![0.3, -0.7, 1.2, 0.1, 0.0, 0.9, -0.4, 2.0]).unwrap();
        let out = attention_gates(&mut Eval, &h, &p, 4).unwrap();
        assert_eq!(out.a.shape(), &[1, 4]);
        assert!(out.a.data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn hand_set_attention_matches_oracle() {
        let p = AttentionParams {
            w_q: Tensor::from_rows(&[vec![0.4, -0.1], vec![0.2, 0.9]]).unwrap(),
            w_k: Tensor::from_rows(&[vec![-0.6, 0.3], vec![0.5, 0.5]]).unwrap(),
            w_v: Tensor::from_rows(&[vec![1.0, 0.2], vec![-0.3, 0.7]]).unwrap(),
            b_q: Tensor::row(vec![0.1, 0.0]).unwrap(),
            b_k: Tensor::row(vec![-0.2, 0.3]).unwrap(),
            b_v: Tensor::row(vec![0.05, -0.15]).unwrap(),
            p_g: Tensor::row(vec![1.5, -0.8]).unwrap(),
        };
        let h = [0.9, -0.4, 0.25, 1.1];
        let out = attention_gates(&mut Eval, &Tensor::row(h.to_vec()).unwrap(), &p, 2).unwrap();
        let expect = attention_oracle(&h, &p, 2);
        for (a, b) in out.a.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_gates_open_interval() {
        let mut rng = seeded(4);
        for _ in 0..10 {
            let p = AttentionParams::init(&mut rng, 4, 4);
            let h = crate::init::gaussian(&mut rng, &[1, 16], 1.0);
            let out = attention_gates(&mut Eval, &h, &p, 4).unwrap();
            for i in 0..4 {
                let s: f64 = out.attention.row_slice(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!(out.a.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn indivisible_hidden_width_is_config_error() {
        let p = AttentionParams::zeros(2, 2);
        let h = Tensor::row(vec![0.0; 6]).unwrap();
        assert!(matches!(attention_gates(&mut Eval, &h, &p, 4), Err(Error::Config(_))));
    }

    #[test]
    fn gates_are_differentiable_in_z() {
        let mut rng = seeded(8);
        let gru = GruParams::init(&mut rng, 4, 8);
        let attn = AttentionParams::init(&mut rng, 2, 2);
        let z = crate::init::gaussian(&mut rng, &[1, 4], 1.0);
        let weights = [0.3, -1.1, 0.7, 0.2];
        let objective = |a: &Tensor| a.data().iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>();

        let mut tape = Tape::new();
        let g = gru.map(&mut |_, t| tape.constant(t.clone()));
        let at = attn.map(&mut |_, t| tape.constant(t.clone()));
        let zv = tape.leaf(z.clone());
        let (a, _) = gate_batch(&mut tape, &zv, &g, &at, 4).unwrap();
        let w = tape.constant(Tensor::row(weights.to_vec()).unwrap());
        let p = tape.mul(&a, &w).unwrap();
        let s = tape.sum(&p).unwrap();
        let grads = tape.backward(s).unwrap();
        let numeric = numeric_grad(&z, 1e-5, |x| objective(&gate_batch(&mut Eval, x, &gru, &attn, 4).unwrap().0));
        assert_close(grads.wrt(zv).unwrap().data(), &numeric, 1e-5);
    }
}
