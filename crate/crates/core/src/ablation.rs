//! Loss-removal and temperature sweeps over a base training configuration.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::generator::GeneratorModel;
use crate::sbv::BoundarySet;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainEvent};

pub const R_TEMP_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 1.0, 3.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoGa,
    NoPpa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoGa, Variant::NoPpa];

    pub fn apply(self, cfg: &mut TrainConfig) {
        cfg.use_ga = self != Variant::NoGa;
        cfg.use_ppa = self != Variant::NoPpa;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoGa => "no-ga",
            Variant::NoPpa => "no-ppa",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-ga" => Ok(Variant::NoGa),
            "no-ppa" => Ok(Variant::NoPpa),
            _ => Err(Error::Argument(format!("unknown variant {s:?}; expected full, no-ga or no-ppa"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub r_temp: f64,
}

/// Every variant paired with every temperature.
pub fn grid(variants: &[Variant], r_temps: &[f64]) -> Vec<Cell> {
    variants.iter().flat_map(|&variant| r_temps.iter().map(move |&r_temp| Cell { variant, r_temp })).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub r_temp: f64,
    pub aa: Vec<f64>,
    pub aa_mean: f64,
    pub ids_mean: f64,
    pub c_diag_mean: f64,
    pub c_offdiag_absmean: f64,
    pub mean_direction_norm: f64,
    /// Mean total loss over the final tenth of training.
    pub final_loss: f64,
}

/// Trains one model per cell from `base` and evaluates it on `z` with edit
/// strengths `xi`. Rows come back in cell order.
pub fn run_ablation(
    base: &TrainConfig,
    g: &GeneratorModel,
    b: &BoundarySet,
    z: &Tensor,
    xi: &[f64],
    cells: &[Cell],
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::Argument("ablation grid is empty".into()));
    }
    let configs = cells
        .iter()
        .map(|c| {
            let mut cfg = base.clone();
            cfg.r_temp = c.r_temp;
            c.variant.apply(&mut cfg);
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    cells
        .par_iter()
        .zip(configs)
        .map(|(cell, cfg)| {
            let tail_from = cfg.steps - (cfg.steps / 10).max(1).min(cfg.steps);
            let (mut tail_sum, mut tail_n) = (0.0, 0usize);
            let state = train(cfg, g, b, |e| {
                if let TrainEvent::Record(r) = e {
                    if r.step > tail_from {
                        tail_sum += r.l;
                        tail_n += 1;
                    }
                }
            })
            .map_err(|a| a.error)?;
            log::info!("ablation cell {} r={} trained", cell.variant, cell.r_temp);
            let report = evaluate(g, &state.mdn, b, z, xi)?;
            Ok(AblationRow {
                variant: cell.variant,
                r_temp: cell.r_temp,
                aa: report.aa,
                aa_mean: report.aa_mean,
                ids_mean: report.ids_mean,
                c_diag_mean: report.c_diag_mean,
                c_offdiag_absmean: report.c_offdiag_absmean,
                mean_direction_norm: report.mean_direction_norm,
                final_loss: if tail_n > 0 { tail_sum / tail_n as f64 } else { f64::NAN },
            })
        })
        .collect()
}

pub fn write_csv(rows: &[AblationRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "variant,r_temp,aa_mean,ids_mean,c_diag_mean,c_offdiag_absmean,mean_direction_norm,final_loss")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.r_temp,
            r.aa_mean,
            r.ids_mean,
            r.c_diag_mean,
            r.c_offdiag_absmean,
            r.mean_direction_norm,
            r.final_loss
        )?;
    }
    Ok(())
}
