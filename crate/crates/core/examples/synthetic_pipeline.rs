//! Fit boundaries, train and evaluate on the default linear generator.
//!
//! Knobs via environment: `LR`, `STEPS`, `RT` (prior temperature), `GA` and
//! `PPA` (1 or 0 to toggle each loss), `SEED`.
//!
//! ```text
//! STEPS=3000 cargo run --release -p moe-disentangle --example synthetic_pipeline
//! ```

use std::time::Instant;

use moe_disentangle::data::{sample_latents, LabeledDataset};
use moe_disentangle::eval::{calibrate_xi, evaluate, DirectionProvider};
use moe_disentangle::generator::{GeneratorConfig, GeneratorModel};
use moe_disentangle::sbv::{fit_boundaries, SbvConfig};
use moe_disentangle::trainer::{train, TrainConfig, TrainEvent};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let t0 = Instant::now();
    let g = GeneratorModel::init(GeneratorConfig::default(), 7).unwrap();
    let data = LabeledDataset::label(&g, sample_latents(20_000, 16, 8).unwrap()).unwrap();
    let sbv = fit_boundaries(&data, &SbvConfig::default()).unwrap();
    println!("sbv {:?} in {:?}", sbv.diagnostics, t0.elapsed());
    let bt = sbv.b.matmul(&g.factors().transpose().unwrap()).unwrap();
    println!("<b_i,T_j> = {:?}", bt);
    let cfg = TrainConfig {
        learning_rate: env("LR", 1e-3),
        steps: env("STEPS", 10_000),
        r_temp: env("RT", 0.5),
        use_ga: env("GA", 1) == 1,
        use_ppa: env("PPA", 1) == 1,
        seed: env("SEED", 0),
        ..Default::default()
    };
    let t1 = Instant::now();
    let every = cfg.steps / 10;
    let state = train(cfg, &g, &sbv, |e| {
        if let TrainEvent::Record(r) = e {
            if every > 0 && r.step % every == 0 {
                println!("{}", serde_json::to_string(r).unwrap());
            }
        }
    })
    .unwrap();
    println!("train {:?}", t1.elapsed());
    let calib = sample_latents(2000, 16, 100).unwrap();
    let test = sample_latents(2000, 16, 101).unwrap();
    let xi = calibrate_xi(&g, &sbv, &calib, 0.95).unwrap();
    let report = evaluate(&g, &state.mdn, &sbv, &test, &xi).unwrap();
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    let dirs = state.mdn.directions(&test.rows(0, 3).unwrap()).unwrap();
    for d in dirs {
        let norms: Vec<f64> = (0..4).map(|i| d.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let wt = d.matmul(&g.factors().transpose().unwrap()).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|i| wt.row_slice(i).iter().map(|x| x / norms[i]).collect()).collect();
        println!("norms {norms:?} cos(w,T) {rows:?}");
    }
    println!("total {:?}", t0.elapsed());
}
