//! Semantic edits and oracle-judged disentanglement metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::SemanticVectorSet;
use crate::generator::{AttributeOracle, GeneratorKind, GeneratorModel, Pushforward};
use crate::linalg::column_basis;
use crate::losses::{cross_alignment_report, AlignmentSummary};
use crate::mdn::Mdn;
use crate::sbv::BoundarySet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    /// `[1, K]`.
    pub z: Tensor,
    pub attr: usize,
    pub xi: f64,
}

/// `G(z + xi w_i)` with the raw (unnormalized) semantic vector.
pub fn edit(g: &impl Pushforward, w: &SemanticVectorSet, req: &EditRequest) -> Result<Tensor> {
    if req.attr >= w.n() {
        return Err(Error::Argument(format!("attribute {} out of range 0..{}", req.attr, w.n())));
    }
    if !req.xi.is_finite() {
        return Err(Error::Argument(format!("step size {} is not finite", req.xi)));
    }
    let dir = Tensor::row(w.row(req.attr).to_vec())?;
    g.generate(&req.z.add(&dir.scale(req.xi))?)
}

/// Anything that yields `n` edit directions for a latent.
pub trait DirectionProvider: Sync {
    fn n(&self) -> usize;
    /// One `[n, K]` matrix per row of `z`.
    fn directions(&self, z: &Tensor) -> Result<Vec<Tensor>>;
}

impl DirectionProvider for Mdn {
    fn n(&self) -> usize {
        self.config.n
    }

    fn directions(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.semantic_vectors(z)?.into_iter().map(|s| s.w).collect())
    }
}

/// The same `[n, K]` directions for every latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedDirections(pub Tensor);

impl DirectionProvider for FixedDirections {
    fn n(&self) -> usize {
        self.0.shape()[0]
    }

    fn directions(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let (b, _) = z.dims2()?;
        Ok(vec![self.0.clone(); b])
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm.is_nan() || norm < 1e-12 {
        return Err(Error::DirectionCollapse { kind: "semantic", index: 0, norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn shifted(z: &[f64], dir: &[f64], step: f64) -> Result<Tensor> {
    Tensor::row(z.iter().zip(dir).map(|(a, d)| a + step * d).collect())
}

/// Step sizes per attribute: the smallest `xi` such that moving along the
/// boundary normal `b_i`, towards the opposite label, flips the oracle label
/// on at least `coverage` of the calibration latents.
pub fn calibrate_xi<G: AttributeOracle>(g: &G, b: &BoundarySet, z: &Tensor, coverage: f64) -> Result<Vec<f64>> {
    const SCAN_STEP: f64 = 0.1;
    const SCAN_MAX: f64 = 50.0;
    let (rows, _) = z.dims2()?;
    if rows == 0 || !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Argument("calibration needs latents and a coverage in (0, 1]".into()));
    }
    let n = b.n();
    let base = g.attribute_scores(z)?;
    let thresholds: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            (0..n)
                .map(|i| {
                    let s = -sign(base.at(r, i));
                    let dir: Vec<f64> = b.b.row_slice(i).iter().map(|x| s * x).collect();
                    let flipped = |xi: f64| -> Result<bool> {
                        let sc = g.attribute_scores(&shifted(z.row_slice(r), &dir, xi)?)?;
                        Ok(sign(sc.data()[i]) == s)
                    };
                    let mut hi = SCAN_STEP;
                    while !flipped(hi)? {
                        hi += SCAN_STEP;
                        if hi > SCAN_MAX {
                            return Ok(f64::INFINITY);
                        }
                    }
                    let mut lo = hi - SCAN_STEP;
                    for _ in 0..50 {
                        let mid = 0.5 * (lo + hi);
                        if flipped(mid)? {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    Ok(hi)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rank = ((coverage * rows as f64).ceil() as usize).clamp(1, rows) - 1;
    (0..n)
        .map(|i| {
            let mut col: Vec<f64> = thresholds.iter().map(|t| t[i]).collect();
            col.sort_by(f64::total_cmp);
            let xi = col[rank];
            if xi.is_finite() {
                Ok(xi)
            } else {
                Err(Error::DegenerateData(format!("attribute {i}: boundary edits fail to flip the label")))
            }
        })
        .collect()
}

/// Orthonormal basis (`[F, r]`) of the output directions the attributes move
/// along at `z`: `A T^T` for the linear kind, `J(z) T^T` otherwise.
pub fn attribute_subspace(g: &GeneratorModel, z: &Tensor) -> Result<Tensor> {
    let j = match g.kind() {
        GeneratorKind::Linear => g.jacobian(&Tensor::zeros(&[1, g.latent_dim()]))?,
        GeneratorKind::Mlp => g.jacobian(z)?,
    };
    let q = column_basis(&j.matmul(&g.factors().transpose()?)?)?;
    if q.shape()[1] >= g.feature_dim() {
        return Err(Error::Config("attribute subspace fills the feature space; no residual remains".into()));
    }
    Ok(q)
}

fn residual(q: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    // x - (x Q) Q^T for a row x
    let proj = x.matmul(q)?.matmul(&q.transpose()?)?;
    Ok(x.sub(&proj)?.into_data())
}

fn cosine01(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    (cos + 1.0) / 2.0
}

/// Outcome of editing one latent along one attribute.
#[derive(Clone, Copy, Debug, PartialEq)]
struct EditOutcome {
    success: bool,
    identity: f64,
    distance: f64,
}

/// Edits every latent along every unit-normalized direction, moving each
/// target score towards the opposite label by `xi[i]`.
fn edit_outcomes<P: DirectionProvider>(
    g: &GeneratorModel,
    provider: &P,
    z: &Tensor,
    xi: &[f64],
) -> Result<Vec<Vec<EditOutcome>>> {
    let (rows, _) = z.dims2()?;
    if rows == 0 {
        return Err(Error::Argument("empty evaluation dataset".into()));
    }
    let n = provider.n();
    if n != g.attributes() || xi.len() != n {
        return Err(Error::Argument(format!("{n} directions, {} attributes, {} step sizes", g.attributes(), xi.len())));
    }
    let dirs = provider.directions(z)?;
    let base = g.attribute_scores(z)?;
    let originals = g.generate(z)?;
    let fixed_q = match g.kind() {
        GeneratorKind::Linear => Some(attribute_subspace(g, &z.rows(0, 1)?)?),
        GeneratorKind::Mlp => None,
    };
    let features = g.feature_dim() as f64;
    (0..rows)
        .into_par_iter()
        .map(|r| {
            let zr = z.rows(r, 1)?;
            let q = match &fixed_q {
                Some(q) => q.clone(),
                None => attribute_subspace(g, &zr)?,
            };
            let orig = originals.rows(r, 1)?;
            let orig_res = residual(&q, &orig)?;
            (0..n)
                .map(|i| {
                    let s = -sign(base.at(r, i));
                    let dir = unit(dirs[r].row_slice(i)).map_err(|e| match e {
                        Error::DirectionCollapse { kind, norm, .. } => {
                            Error::DirectionCollapse { kind, index: i, norm }
                        }
                        other => other,
                    })?;
                    let moved = shifted(z.row_slice(r), &dir, s * xi[i])?;
                    let scores = g.attribute_scores(&moved)?;
                    let target = sign(scores.data()[i]) == s;
                    let kept = (0..n).filter(|&j| j != i).all(|j| sign(scores.data()[j]) == sign(base.at(r, j)));
                    let edited = g.generate(&moved)?;
                    Ok(EditOutcome {
                        success: target && kept,
                        identity: cosine01(&orig_res, &residual(&q, &edited)?),
                        distance: edited.sub(&orig)?.norm() / features.sqrt(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn column_means(outcomes: &[Vec<EditOutcome>], f: impl Fn(&EditOutcome) -> f64) -> Vec<f64> {
    let n = outcomes[0].len();
    (0..n).map(|i| outcomes.iter().map(|o| f(&o[i])).sum::<f64>() / outcomes.len() as f64).collect()
}

/// Fraction of latents whose edit flips the target label the intended way
/// while every other label stays put.
pub fn attribute_accuracy<P: DirectionProvider>(
    g: &GeneratorModel,
    provider: &P,
    z: &Tensor,
    xi: &[f64],
) -> Result<Vec<f64>> {
    let o = edit_outcomes(g, provider, z, xi)?;
    Ok(column_means(&o, |e| f64::from(u8::from(e.success))))
}

/// Mean `(cos + 1) / 2` between residual features of original and edited
/// outputs once the attribute directions are projected out.
pub fn identity_score<P: DirectionProvider>(
    g: &GeneratorModel,
    provider: &P,
    z: &Tensor,
    xi: &[f64],
) -> Result<Vec<f64>> {
    let o = edit_outcomes(g, provider, z, xi)?;
    Ok(column_means(&o, |e| e.identity))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub xi: Vec<f64>,
    pub aa: Vec<f64>,
    pub aa_mean: f64,
    pub ids: Vec<f64>,
    pub ids_mean: f64,
    pub c_diag_mean: f64,
    pub c_offdiag_absmean: f64,
    /// Root-mean-square per-feature distance between original and edited outputs.
    pub feature_distance: Vec<f64>,
    /// Mean `|w_i|` over latents and attributes.
    pub mean_direction_norm: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate<P: DirectionProvider>(
    g: &GeneratorModel,
    provider: &P,
    b: &BoundarySet,
    z: &Tensor,
    xi: &[f64],
) -> Result<EvalReport> {
    let outcomes = edit_outcomes(g, provider, z, xi)?;
    let (rows, _) = z.dims2()?;
    let dirs = provider.directions(z)?;
    let summaries = (0..rows)
        .into_par_iter()
        .map(|r| {
            let j = g.jacobian(&z.rows(r, 1)?)?;
            Ok(cross_alignment_report(&dirs[r], &b.b, &j)?.1)
        })
        .collect::<Result<Vec<AlignmentSummary>>>()?;
    let norms: Vec<f64> = dirs
        .iter()
        .flat_map(|w| {
            (0..w.shape()[0]).map(|i| w.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect::<Vec<_>>()
        })
        .collect();
    let aa = column_means(&outcomes, |e| f64::from(u8::from(e.success)));
    let ids = column_means(&outcomes, |e| e.identity);
    Ok(EvalReport {
        samples: rows,
        xi: xi.to_vec(),
        aa_mean: mean(&aa),
        ids_mean: mean(&ids),
        aa,
        ids,
        c_diag_mean: mean(&summaries.iter().map(|s| s.diag_mean).collect::<Vec<_>>()),
        c_offdiag_absmean: mean(&summaries.iter().map(|s| s.offdiag_absmean).collect::<Vec<_>>()),
        feature_distance: column_means(&outcomes, |e| e.distance),
        mean_direction_norm: mean(&norms),
    })
}
