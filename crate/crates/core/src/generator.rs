//! Frozen synthetic generators `G: R^K -> R^F` with known attribute
//! directions, standing in for a pretrained image generator.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{jvp, DifferentiableMap, Eval, TensorOps};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::init::{gaussian, orthonormal_rows, seeded};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Linear,
    Mlp,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::Linear => "linear",
            GeneratorKind::Mlp => "mlp",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(GeneratorKind::Linear),
            "mlp" => Ok(GeneratorKind::Mlp),
            other => Err(Error::Argument(format!("unknown generator kind {other:?} (expected linear or mlp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub latent: usize,
    pub features: usize,
    pub n: usize,
    /// Hidden width of the mlp kind; ignored by the linear kind.
    pub hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { kind: GeneratorKind::Linear, latent: 16, features: 64, n: 4, hidden: 32 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.n == 0 {
            return Err(Error::Config("latent width and attribute count must be positive".into()));
        }
        if self.n > self.latent {
            return Err(Error::Config(format!(
                "{} orthogonal attributes do not fit in {} latent dimensions",
                self.n, self.latent
            )));
        }
        if self.features < self.latent {
            return Err(Error::Config(format!(
                "feature width {} is smaller than latent width {}",
                self.features, self.latent
            )));
        }
        if self.kind == GeneratorKind::Mlp && !(self.latent <= self.hidden && self.hidden <= self.features) {
            return Err(Error::Config(format!(
                "mlp widths must satisfy K <= hidden <= F (got {} / {} / {})",
                self.latent, self.hidden, self.features
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    /// `G(z) = z A^T` with `A: [F, K]`.
    Linear { a: Tensor },
    /// `G(z) = tanh(z W1^T + b1) W2^T + b2`.
    Mlp { w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor },
}

/// Output-space access needed to train directions: no attribute information.
pub trait Pushforward: Sync {
    fn latent_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Rows of `z` (`[B, K]`) mapped to rows of `[B, F]`.
    fn generate(&self, z: &Tensor) -> Result<Tensor>;
    /// `[F, K]` Jacobian at a single `[1, K]` latent.
    fn jacobian(&self, z: &Tensor) -> Result<Tensor>;
}

/// Ground-truth attribute scores; the sign of each score is the label.
pub trait AttributeOracle: Sync {
    fn attributes(&self) -> usize;
    /// `[B, n]` scores for rows of `z`.
    fn attribute_scores(&self, z: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    layers: Layers,
    /// `[n, K]` orthonormal factor directions.
    factors: Tensor,
    /// `[n, F]` linear readout applied to `G(z) - G(0)`.
    readout: Tensor,
    /// `G(0)`, `[1, F]`.
    offset: Tensor,
}

impl GeneratorModel {
    /// Random generator of the configured kind. The linear map has orthonormal
    /// columns; mlp weights are Gaussian with standard deviation `1/sqrt(fan_in)`.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let (k, f, h) = (config.latent, config.features, config.hidden);
        let layers = match config.kind {
            // orthonormal columns: the pushforward preserves latent angles
            GeneratorKind::Linear => Layers::Linear { a: orthonormal_rows(&mut rng, k, f)?.transpose()? },
            GeneratorKind::Mlp => Layers::Mlp {
                w1: gaussian(&mut rng, &[h, k], 1.0 / (k as f64).sqrt()),
                b1: gaussian(&mut rng, &[1, h], 0.1),
                w2: gaussian(&mut rng, &[f, h], 1.0 / (h as f64).sqrt()),
                b2: gaussian(&mut rng, &[1, f], 0.1),
            },
        };
        let factors = orthonormal_rows(&mut rng, config.n, k)?;
        Self::assemble(config, layers, factors)
    }

    pub fn linear(a: Tensor, factors: Tensor) -> Result<Self> {
        let (f, k) = a.dims2()?;
        let (n, _) = factors.dims2()?;
        let config = GeneratorConfig { kind: GeneratorKind::Linear, latent: k, features: f, n, hidden: k };
        Self::assemble(config, Layers::Linear { a }, factors)
    }

    pub fn mlp(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, factors: Tensor) -> Result<Self> {
        let (h, k) = w1.dims2()?;
        let (f, h2) = w2.dims2()?;
        let (n, _) = factors.dims2()?;
        if h2 != h || b1.shape() != [1, h] || b2.shape() != [1, f] {
            return Err(Error::Dimension("inconsistent mlp layer shapes".into()));
        }
        let config = GeneratorConfig { kind: GeneratorKind::Mlp, latent: k, features: f, n, hidden: h };
        Self::assemble(config, Layers::Mlp { w1, b1, w2, b2 }, factors)
    }

    fn assemble(config: GeneratorConfig, layers: Layers, factors: Tensor) -> Result<Self> {
        config.validate()?;
        if factors.shape() != [config.n, config.latent] {
            return Err(Error::Dimension(format!(
                "factor directions have shape {:?}, expected [{}, {}]",
                factors.shape(),
                config.n,
                config.latent
            )));
        }
        for i in 0..config.n {
            for j in 0..=i {
                let d: f64 = factors.row_slice(i).iter().zip(factors.row_slice(j)).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    return Err(Error::Config("factor directions must be orthonormal".into()));
                }
            }
        }
        let mut model = Self {
            readout: Tensor::zeros(&[config.n, config.features]),
            offset: Tensor::zeros(&[1, config.features]),
            config,
            layers,
            factors,
        };
        let origin = Tensor::zeros(&[1, model.config.latent]);
        model.offset = model.generate(&origin)?;
        // score(z) = T pinv(J(0)) (G(z) - G(0)); exactly T z for the linear kind
        let j0 = model.jacobian(&origin)?;
        model.readout = model.factors.matmul(&linalg::pinv(&j0)?)?;
        Ok(model)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn kind(&self) -> GeneratorKind {
        self.config.kind
    }

    /// Ground-truth factor directions `T` (`[n, K]`, orthonormal rows).
    pub fn factors(&self) -> &Tensor {
        &self.factors
    }

    /// Attribute scores of generated features (`[B, F]` to `[B, n]`).
    pub fn readout(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _) = x.dims2()?;
        let centered = x.sub(&self.offset.rows_repeated(b))?;
        centered.matmul(&self.readout.transpose()?)
    }

    /// `+1` / `-1` labels from score signs; zero counts as negative.
    pub fn labels(&self, z: &Tensor) -> Result<Vec<Vec<i8>>> {
        let s = self.attribute_scores(z)?;
        let (b, _) = s.dims2()?;
        Ok((0..b).map(|r| s.row_slice(r).iter().map(|&x| if x > 0.0 { 1 } else { -1 }).collect()).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.set_meta("generator.kind", self.config.kind.to_string());
        c.set_meta("generator.config", serde_json::to_value(&self.config)?);
        match &self.layers {
            Layers::Linear { a } => c.insert("generator.A", a.clone())?,
            Layers::Mlp { w1, b1, w2, b2 } => {
                c.insert("generator.mlp.w1", w1.clone())?;
                c.insert("generator.mlp.b1", b1.clone())?;
                c.insert("generator.mlp.w2", w2.clone())?;
                c.insert("generator.mlp.b2", b2.clone())?;
            }
        }
        c.insert("generator.T", self.factors.clone())?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let kind: GeneratorKind = c.meta_str("generator.kind")?.parse()?;
        let factors = c.require("generator.T")?.clone();
        let model = match kind {
            GeneratorKind::Linear => Self::linear(c.require("generator.A")?.clone(), factors)?,
            GeneratorKind::Mlp => Self::mlp(
                c.require("generator.mlp.w1")?.clone(),
                c.require("generator.mlp.b1")?.clone(),
                c.require("generator.mlp.w2")?.clone(),
                c.require("generator.mlp.b2")?.clone(),
                factors,
            )?,
        };
        if let Some(v) = c.meta("generator.config") {
            let stored: GeneratorConfig = serde_json::from_value(v.clone())?;
            let mut expect = model.config.clone();
            if kind == GeneratorKind::Linear {
                expect.hidden = stored.hidden;
            }
            if stored != expect {
                return Err(Error::Format("generator.config disagrees with stored tensors".into()));
            }
            return Ok(Self { config: stored, ..model });
        }
        Ok(model)
    }

    fn check_latent(&self, z: &Tensor) -> Result<usize> {
        let (b, k) = z.dims2()?;
        if k != self.config.latent {
            return Err(Error::Dimension(format!("latent width {k}, generator expects {}", self.config.latent)));
        }
        Ok(b)
    }
}

impl DifferentiableMap for GeneratorModel {
    fn input_dim(&self) -> usize {
        self.config.latent
    }

    fn output_dim(&self) -> usize {
        self.config.features
    }

    fn apply<O: TensorOps>(&self, ops: &mut O, z: &O::V) -> Result<O::V> {
        match &self.layers {
            Layers::Linear { a } => {
                let at = ops.constant(a.transpose()?);
                ops.matmul(z, &at)
            }
            Layers::Mlp { w1, b1, w2, b2 } => {
                let w1t = ops.constant(w1.transpose()?);
                let b1 = ops.constant(b1.clone());
                let w2t = ops.constant(w2.transpose()?);
                let b2 = ops.constant(b2.clone());
                let h = ops.matmul(z, &w1t)?;
                let h = ops.add_bias(&h, &b1)?;
                let h = ops.tanh(&h)?;
                let x = ops.matmul(&h, &w2t)?;
                ops.add_bias(&x, &b2)
            }
        }
    }
}

impl Pushforward for GeneratorModel {
    fn latent_dim(&self) -> usize {
        self.config.latent
    }

    fn feature_dim(&self) -> usize {
        self.config.features
    }

    fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        self.apply(&mut Eval, z)
    }

    fn jacobian(&self, z: &Tensor) -> Result<Tensor> {
        if self.check_latent(z)? != 1 {
            return Err(Error::Dimension("jacobian takes a single [1, K] latent".into()));
        }
        match &self.layers {
            Layers::Linear { a } => Ok(a.clone()),
            Layers::Mlp { .. } => {
                let k = self.config.latent;
                let columns = (0..k)
                    .into_par_iter()
                    .map(|j| {
                        let mut e = vec![0.0; k];
                        e[j] = 1.0;
                        jvp(self, z, &Tensor::row(e)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                // columns are [1, F]; stack as rows of J^T
                let rows: Vec<Vec<f64>> = columns.into_iter().map(|c| c.into_data()).collect();
                Tensor::from_rows(&rows)?.transpose()
            }
        }
    }
}

impl AttributeOracle for GeneratorModel {
    fn attributes(&self) -> usize {
        self.config.n
    }

    fn attribute_scores(&self, z: &Tensor) -> Result<Tensor> {
        self.readout(&self.generate(z)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_model() -> GeneratorModel {
        GeneratorModel::init(GeneratorConfig { kind: GeneratorKind::Mlp, ..Default::default() }, 5).unwrap()
    }

    #[test]
    fn identity_linear_generator() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let g = GeneratorModel::linear(Tensor::eye(3), t).unwrap();
        let z = Tensor::row(vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(g.generate(&z).unwrap(), z);
        assert_eq!(g.jacobian(&z).unwrap(), Tensor::eye(3));
    }

    #[test]
    fn mlp_at_origin_with_zero_inner_bias_returns_outer_bias() {
        let mut rng = seeded(0);
        let b2 = gaussian(&mut rng, &[1, 5], 1.0);
        let g = GeneratorModel::mlp(
            gaussian(&mut rng, &[4, 3], 1.0),
            Tensor::zeros(&[1, 4]),
            gaussian(&mut rng, &[5, 4], 1.0),
            b2.clone(),
            Tensor::row(vec![0.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.generate(&Tensor::zeros(&[1, 3])).unwrap(), b2);
    }

    #[test]
    fn mlp_matches_transcription() {
        let g = mlp_model();
        let Layers::Mlp { w1, b1, w2, b2 } = &g.layers else { unreachable!() };
        let z = gaussian(&mut seeded(9), &[1, 16], 1.0);
        let h: Vec<f64> =
            (0..32).map(|i| ((0..16).map(|j| w1.at(i, j) * z.data()[j]).sum::<f64>() + b1.data()[i]).tanh()).collect();
        let x: Vec<f64> = (0..64).map(|i| (0..32).map(|j| w2.at(i, j) * h[j]).sum::<f64>() + b2.data()[i]).collect();
        let out = g.generate(&z).unwrap();
        for (a, b) in out.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_jacobian_matches_finite_differences_and_varies() {
        let g = mlp_model();
        let z = gaussian(&mut seeded(1), &[1, 16], 1.0);
        let j = g.jacobian(&z).unwrap();
        let h = 1e-5;
        for c in 0..16 {
            let mut zp = z.clone();
            zp.data_mut()[c] += h;
            let mut zm = z.clone();
            zm.data_mut()[c] -= h;
            let d = g.generate(&zp).unwrap().sub(&g.generate(&zm).unwrap()).unwrap().scale(0.5 / h);
            for r in 0..64 {
                let (a, n) = (j.at(r, c), d.data()[r]);
                assert!((a - n).abs() <= 1e-5 * 1f64.max(a.abs()).max(n.abs()), "J[{r},{c}] {a} vs {n}");
            }
        }
        let j2 = g.jacobian(&gaussian(&mut seeded(2), &[1, 16], 1.0)).unwrap();
        assert!(j.max_abs_diff(&j2) > 1e-3);
    }

    #[test]
    fn mlp_taylor_remainder_is_second_order() {
        let g = mlp_model();
        let z = gaussian(&mut seeded(3), &[1, 16], 1.0);
        let v = gaussian(&mut seeded(4), &[1, 16], 1.0);
        let jv = v.matmul(&g.jacobian(&z).unwrap().transpose().unwrap()).unwrap();
        let g0 = g.generate(&z).unwrap();
        let err = |h: f64| {
            let moved = g.generate(&z.add(&v.scale(h)).unwrap()).unwrap();
            moved.sub(&g0).unwrap().sub(&jv.scale(h)).unwrap().norm()
        };
        let errs: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&h| err(h)).collect();
        for w in errs.windows(2) {
            assert!(w[0] / w[1] >= 3.5, "ratio {}", w[0] / w[1]);
        }
    }

    #[test]
    fn linear_increment_is_exact() {
        let g = GeneratorModel::init(GeneratorConfig::default(), 2).unwrap();
        let z = gaussian(&mut seeded(5), &[1, 16], 1.0);
        let v = gaussian(&mut seeded(6), &[1, 16], 1.0);
        let lhs = g.generate(&z.add(&v).unwrap()).unwrap().sub(&g.generate(&z).unwrap()).unwrap();
        let rhs = v.matmul(&g.jacobian(&z).unwrap().transpose().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn oracle_reads_factor_coordinates() {
        let g = GeneratorModel::init(GeneratorConfig::default(), 2).unwrap();
        for i in 0..4 {
            let ti = g.factors().rows(i, 1).unwrap();
            let s = g.attribute_scores(&ti).unwrap();
            let s_neg = g.attribute_scores(&ti.scale(-1.0)).unwrap();
            for j in 0..4 {
                if i == j {
                    assert!(s.data()[j] > 0.0 && s_neg.data()[j] < 0.0);
                } else {
                    assert!(s.data()[j].abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn score_sweep_is_monotone() {
        let g = GeneratorModel::init(GeneratorConfig::default(), 8).unwrap();
        let z = gaussian(&mut seeded(7), &[1, 16], 1.0);
        for i in 0..4 {
            let ti = g.factors().rows(i, 1).unwrap();
            let scores: Vec<f64> = (0..=60)
                .map(|s| {
                    let xi = -3.0 + 0.1 * s as f64;
                    g.attribute_scores(&z.add(&ti.scale(xi)).unwrap()).unwrap().data()[i]
                })
                .collect();
            assert!(scores.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn checkpoint_round_trip_both_kinds() {
        for kind in [GeneratorKind::Linear, GeneratorKind::Mlp] {
            let g = GeneratorModel::init(GeneratorConfig { kind, ..Default::default() }, 4).unwrap();
            let c = g.to_checkpoint().unwrap();
            assert_eq!(c.meta_str("generator.kind").unwrap(), kind.to_string());
            let back =
                GeneratorModel::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            GeneratorConfig { n: 17, ..Default::default() },
            GeneratorConfig { features: 8, ..Default::default() },
            GeneratorConfig { kind: GeneratorKind::Mlp, hidden: 100, ..Default::default() },
            GeneratorConfig { latent: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(GeneratorModel::init(c, 0).is_err());
        }
        assert!("conv".parse::<GeneratorKind>().is_err());
    }
}
