use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use moe_disentangle::ablation::{grid, run_ablation, write_csv, Variant};
use moe_disentangle::data::{sample_latents, LabeledDataset};
use moe_disentangle::eval::{calibrate_xi, edit as edit_latent, evaluate, EditRequest};
use moe_disentangle::experts::SemanticVectorSet;
use moe_disentangle::generator::{GeneratorConfig, GeneratorKind, GeneratorModel};
use moe_disentangle::init::derive_seed;
use moe_disentangle::mdn::Mdn;
use moe_disentangle::sbv::{fit_boundaries, BoundarySet, SbvConfig};
use moe_disentangle::trainer::{TrainConfig, TrainEvent, TrainState, Trainer};
use moe_disentangle::{Checkpoint, Error, Tensor};
use serde_json::json;

use crate::manifest::{manifest_path, Recorder};
use crate::{AblateArgs, EditArgs, EvalArgs, FitSbvArgs, GenDataArgs, TrainArgs};

const THREADS_VAR: &str = "MOE_DISENTANGLE_THREADS";
const LATENT_STREAM: u64 = 1;

/// Bad flags or inputs; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e
        .chain()
        .any(|c| c.is::<Usage>() || matches!(c.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Argument(_))));
    if is_usage {
        2
    } else {
        1
    }
}

pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_VAR}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_generator(path: &Path) -> Result<GeneratorModel> {
    GeneratorModel::from_checkpoint(&load_checkpoint(path)?)
        .with_context(|| format!("reading generator from {}", path.display()))
}

fn load_sbv(path: &Path) -> Result<BoundarySet> {
    BoundarySet::read_checkpoint(&load_checkpoint(path)?)
        .with_context(|| format!("reading boundaries from {}", path.display()))
}

fn load_model(path: &Path) -> Result<Mdn> {
    Mdn::read_checkpoint(&load_checkpoint(path)?).with_context(|| format!("reading model from {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LabeledDataset::read_jsonl(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Per-attribute step sizes from an `--xi` flag.
fn resolve_xi(flag: &str, coverage: f64, g: &GeneratorModel, b: &BoundarySet, z: &Tensor) -> Result<Vec<f64>> {
    if flag == "auto" {
        let xi = calibrate_xi(g, b, z, coverage)?;
        info!("calibrated xi {xi:?}");
        return Ok(xi);
    }
    let v: f64 = flag.parse().map_err(|_| usage(format!("--xi must be \"auto\" or a number, got {flag:?}")))?;
    if !v.is_finite() {
        bail!(usage(format!("--xi {v} is not finite")));
    }
    Ok(vec![v; b.n()])
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let rec = Recorder::start("gen-data", &[]);
    if a.count == 0 {
        bail!(usage("--count must be at least 1"));
    }
    let kind: GeneratorKind = a.kind.parse().map_err(|e: Error| usage(e.to_string()))?;
    let config = GeneratorConfig { kind, latent: a.k, features: a.f, n: a.n, hidden: a.hidden };
    let g = GeneratorModel::init(config.clone(), a.seed)?;
    let z = sample_latents(a.count, a.k, derive_seed(a.seed, LATENT_STREAM))?;
    let data = LabeledDataset::label(&g, z)?;

    let ckpt = with_suffix(&a.out_prefix, ".generator.ckpt");
    let jsonl = with_suffix(&a.out_prefix, ".jsonl");
    g.to_checkpoint()?.save(&ckpt)?;
    let mut w = BufWriter::new(File::create(&jsonl).with_context(|| format!("creating {}", jsonl.display()))?);
    data.write_jsonl(&mut w)?;
    w.flush()?;
    info!("wrote {} records to {}", data.len(), jsonl.display());
    rec.finish(
        &with_suffix(&a.out_prefix, ".manifest.json"),
        json!({ "generator": config, "count": a.count }),
        Some(a.seed),
        &[&ckpt, &jsonl],
    )
}

pub fn fit_sbv(a: FitSbvArgs) -> Result<()> {
    let rec = Recorder::start("fit-sbv", &[&a.dataset]);
    let data = load_dataset(&a.dataset)?;
    let mut cfg = SbvConfig::default();
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    if let Some(m) = a.min_accuracy {
        cfg.min_accuracy = m;
    }
    let b = fit_boundaries(&data, &cfg)?;
    for (i, d) in b.diagnostics.iter().enumerate() {
        if d.converged {
            info!("attribute {i}: {} steps, held-out accuracy {:.4}", d.steps, d.holdout_accuracy);
        } else {
            warn!(
                "attribute {i}: not converged after {} steps (gradient norm {:e}), held-out accuracy {:.4}",
                d.steps, d.grad_norm, d.holdout_accuracy
            );
        }
    }
    let mut c = Checkpoint::new();
    b.write_checkpoint(&mut c)?;
    c.save(&a.out)?;
    rec.finish(&manifest_path(&a.out), serde_json::to_value(cfg)?, None, &[&a.out])
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.generator, &a.sbv];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.resume.as_deref());
    let rec = Recorder::start("train", &inputs);

    let g = load_generator(&a.generator)?;
    let b = load_sbv(&a.sbv)?;
    let state = match &a.resume {
        Some(p) => {
            let s = TrainState::from_checkpoint(&load_checkpoint(p)?)?;
            if a.config.is_some() || a.seed.is_some() {
                bail!(usage("--resume takes its configuration from the checkpoint; drop --config and --seed"));
            }
            info!("resuming at step {}", s.step);
            s
        }
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            TrainState::new(cfg)?
        }
    };
    let config = state.config.clone();
    let trainer = Trainer::new(&config, &g, &b)?;

    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let mut io_error: Option<anyhow::Error> = None;
    let every = (config.steps / 20).max(1);
    let outcome = trainer.run(state, |event| {
        if io_error.is_some() {
            return;
        }
        let r = match event {
            TrainEvent::Record(r) => {
                if r.step % every == 0 || r.step == config.steps {
                    info!("step {} L={:.6e} L_GA={:.6e} L_PPA={:.6e}", r.step, r.l, r.l_ga, r.l_ppa);
                }
                match log.as_mut() {
                    Some(w) => {
                        serde_json::to_writer(&mut *w, r).map_err(anyhow::Error::from).and_then(|()| Ok(writeln!(w)?))
                    }
                    None => Ok(()),
                }
            }
            TrainEvent::Checkpoint(s) => s.to_checkpoint().and_then(|c| c.save(&a.out)).map_err(anyhow::Error::from),
        };
        if let Err(e) = r {
            io_error = Some(e);
        }
    });
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(e) = io_error {
        return Err(e);
    }
    let state = match outcome {
        Ok(s) => s,
        Err(abort) => {
            if let Some(s) = &abort.state {
                s.to_checkpoint()?.save(&a.out)?;
                warn!("saved last good state (step {}) to {}", s.step, a.out.display());
            }
            return Err(abort.into());
        }
    };
    state.to_checkpoint()?.save(&a.out)?;
    info!("wrote {} after {} steps", a.out.display(), state.step);
    let mut outputs: Vec<&Path> = vec![&a.out];
    outputs.extend(a.log.as_deref());
    rec.finish(&manifest_path(&a.out), serde_json::to_value(&config)?, Some(config.seed), &outputs)
}

fn read_latent(a: &EditArgs, k: usize) -> Result<Tensor> {
    if let (Some(ds), Some(i)) = (&a.dataset, a.z_index) {
        let data = load_dataset(ds)?;
        if i >= data.len() {
            bail!(usage(format!("--z-index {i} out of range for {} records", data.len())));
        }
        return Ok(data.z.rows(i, 1)?);
    }
    let p = a.z_file.as_ref().ok_or_else(|| usage("one of --z-index or --z-file is required"))?;
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let z: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: expected a JSON array of numbers: {e}", p.display())))?;
    if z.len() != k {
        bail!(usage(format!("latent has {} entries, generator expects {k}", z.len())));
    }
    Ok(Tensor::row(z)?)
}

pub fn edit(a: EditArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.model, &a.generator];
    inputs.extend(a.dataset.as_deref());
    inputs.extend(a.z_file.as_deref());
    let rec = Recorder::start("edit", &inputs);
    let g = load_generator(&a.generator)?;
    let mdn = load_model(&a.model)?;
    let z = read_latent(&a, g.config().latent)?;
    let mut w = mdn.semantic_vectors_one(&z)?;
    if a.unit && a.attr < w.n() {
        w = unit_rows(&w)?;
    }
    let edited = edit_latent(&g, &w, &EditRequest { z: z.clone(), attr: a.attr, xi: a.xi })?;
    let original = edit_latent(&g, &w, &EditRequest { z: z.clone(), attr: a.attr, xi: 0.0 })?;
    let out = json!({
        "attr": a.attr,
        "xi": a.xi,
        "unit": a.unit,
        "z": z.data(),
        "direction": w.row(a.attr),
        "original": original.data(),
        "edited": edited.data(),
    });
    match &a.out {
        Some(p) => {
            write_json(p, &out)?;
            rec.finish(
                &manifest_path(p),
                json!({ "attr": a.attr, "xi": a.xi, "unit": a.unit, "z_index": a.z_index }),
                None,
                &[p.as_path()],
            )
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{}", serde_json::to_string(&out)?) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn unit_rows(w: &SemanticVectorSet) -> Result<SemanticVectorSet> {
    let (n, _) = w.w.dims2()?;
    let rows = (0..n)
        .map(|i| {
            let r = w.w.row_slice(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                bail!("direction {i} is zero and cannot be normalized");
            }
            Ok(r.iter().map(|x| x / norm).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(SemanticVectorSet { w: Tensor::from_rows(&rows)?, gates: w.gates.clone() })
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let rec = Recorder::start("eval", &[&a.model, &a.generator, &a.sbv, &a.dataset]);
    let g = load_generator(&a.generator)?;
    let b = load_sbv(&a.sbv)?;
    let mdn = load_model(&a.model)?;
    let z = load_dataset(&a.dataset)?.z;
    let xi = resolve_xi(&a.xi, a.coverage, &g, &b, &z)?;
    let report = evaluate(&g, &mdn, &b, &z, &xi)?;
    info!("AA {:?} (mean {:.4}), IDS mean {:.4}", report.aa, report.aa_mean, report.ids_mean);
    write_json(&a.report, &report)?;
    rec.finish(&manifest_path(&a.report), json!({ "xi": a.xi, "coverage": a.coverage }), None, &[&a.report])
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.generator, &a.sbv, &a.dataset];
    inputs.extend(a.config.as_deref());
    let rec = Recorder::start("ablate", &inputs);
    let variants = a
        .variants
        .iter()
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<Variant>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let cells = grid(&variants, &a.r_temps);
    if cells.is_empty() {
        bail!(usage("ablation grid is empty: give at least one variant and one temperature"));
    }
    let mut base = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        base.seed = seed;
    }
    let g = load_generator(&a.generator)?;
    let b = load_sbv(&a.sbv)?;
    let z = load_dataset(&a.dataset)?.z;
    let xi = resolve_xi(&a.xi, a.coverage, &g, &b, &z)?;
    info!("running {} cells", cells.len());
    let rows = run_ablation(&base, &g, &b, &z, &xi, &cells)?;
    write_json(&a.out, &rows)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.csv {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        write_csv(&rows, &mut w)?;
        w.flush()?;
        outputs.push(p);
    }
    rec.finish(&manifest_path(&a.out), json!({ "base": base, "cells": cells, "xi": xi }), Some(base.seed), &outputs)
}
