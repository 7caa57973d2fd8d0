//! Latent sampling and labeled latent datasets (JSON lines).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::AttributeOracle;
use crate::init::{gaussian, seeded};
use crate::tensor::Tensor;

/// `count` i.i.d. standard normal latents as a `[count, K]` tensor.
pub fn sample_latents(count: usize, latent: usize, seed: u64) -> Result<Tensor> {
    if count == 0 || latent == 0 {
        return Err(Error::Argument("latent count and width must be positive".into()));
    }
    Ok(gaussian(&mut seeded(seed), &[count, latent], 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub z: Vec<f64>,
    pub labels: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, K]`.
    pub z: Tensor,
    /// `N` rows of `n` labels in `{-1, +1}`.
    pub labels: Vec<Vec<i8>>,
}

impl LabeledDataset {
    /// Labels every row of `z` by the sign of the oracle scores.
    pub fn label(oracle: &impl AttributeOracle, z: Tensor) -> Result<Self> {
        let scores = oracle.attribute_scores(&z)?;
        let (rows, _) = scores.dims2()?;
        let labels =
            (0..rows).map(|r| scores.row_slice(r).iter().map(|&s| if s > 0.0 { 1 } else { -1 }).collect()).collect();
        Ok(Self { z, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn attributes(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for (r, labels) in self.labels.iter().enumerate() {
            let rec = Record { z: self.z.row_slice(r).to_vec(), labels: labels.clone() };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            if rec.labels.iter().any(|&l| l != 1 && l != -1) {
                return Err(Error::Format(format!("line {}: labels must be +1 or -1", i + 1)));
            }
            if let Some(first) = rows.first().map(Vec::len) {
                if rec.z.len() != first || rec.labels.len() != labels.first().map_or(0, Vec::len) {
                    return Err(Error::Format(format!("line {}: inconsistent record widths", i + 1)));
                }
            }
            rows.push(rec.z);
            labels.push(rec.labels);
        }
        if rows.is_empty() {
            return Err(Error::Format("dataset is empty".into()));
        }
        Ok(Self { z: Tensor::from_rows(&rows)?, labels })
    }
}
