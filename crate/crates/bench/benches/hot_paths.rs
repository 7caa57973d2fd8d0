use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use moe_disentangle::data::sample_latents;
use moe_disentangle::generator::{GeneratorConfig, GeneratorKind, GeneratorModel, Pushforward};
use moe_disentangle::init::{gaussian, seeded};
use moe_disentangle::losses::ga_loss;
use moe_disentangle::sbv::BoundarySet;
use moe_disentangle::trainer::{TrainConfig, TrainState, Trainer};

fn generator(kind: GeneratorKind) -> GeneratorModel {
    GeneratorModel::init(GeneratorConfig { kind, ..Default::default() }, 7).unwrap()
}

fn jacobian(c: &mut Criterion) {
    let z = sample_latents(1, 16, 1).unwrap();
    let mut group = c.benchmark_group("jacobian");
    for kind in [GeneratorKind::Linear, GeneratorKind::Mlp] {
        let g = generator(kind);
        group.bench_function(kind.to_string(), |b| b.iter(|| g.jacobian(black_box(&z)).unwrap()));
    }
    group.finish();
}

fn alignment_loss(c: &mut Criterion) {
    let g = generator(GeneratorKind::Mlp);
    let z = sample_latents(1, 16, 1).unwrap();
    let j = g.jacobian(&z).unwrap();
    let w = gaussian(&mut seeded(2), &[4, 16], 1.0);
    c.bench_function("ga_loss/n4_k16_f64", |b| b.iter(|| ga_loss(black_box(&w), g.factors(), &j).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    for kind in [GeneratorKind::Linear, GeneratorKind::Mlp] {
        let g = generator(kind);
        let b = BoundarySet { b: g.factors().clone(), intercepts: vec![0.0; 4], diagnostics: Vec::new() };
        let cfg = TrainConfig { steps: 1, dataset_size: 2, learning_rate: 1e-3, ..Default::default() };
        let trainer = Trainer::new(&cfg, &g, &b).unwrap();
        let fresh = TrainState::new(cfg.clone()).unwrap();
        group.bench_function(format!("batch2_{kind}"), |bench| {
            bench.iter_batched(
                || fresh.clone(),
                |mut s| {
                    trainer.step(&mut s).unwrap();
                    s
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, jacobian, alignment_loss, train_step);
criterion_main!(benches);
