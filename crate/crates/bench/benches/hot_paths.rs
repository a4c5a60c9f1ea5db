use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use ptrag_core::metrics::{energy_distance, min_cost_assignment};
use ptrag_core::retrieval::PerturbationDb;
use ptrag_core::synthdata::{generate, split_fewshot, SyntheticConfig};
use ptrag_core::trainer::{train, TrainConfig};
use ptrag_core::{SplitMix64, Tensor};

fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.next_f64() - 0.5).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = SplitMix64::new(1);
    let a = random(&mut rng, 64, 64);
    let b = random(&mut rng, 64, 64);
    c.bench_function("matmul_64", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));

    let x = random(&mut rng, 32, 60);
    let y = random(&mut rng, 32, 60);
    c.bench_function("energy_32x60", |bch| bch.iter(|| black_box(energy_distance(&x, &y).unwrap())));

    let cost = random(&mut rng, 32, 32);
    c.bench_function("hungarian_32", |bch| bch.iter(|| black_box(min_cost_assignment(&cost).unwrap())));

    let emb = random(&mut rng, 1000, 32);
    let ids = (0..1000).map(|i| format!("P{i}")).collect();
    let db = PerturbationDb::build(ids, &emb).unwrap();
    c.bench_function("top_k_1000", |bch| bch.iter(|| black_box(db.top_k_by_index(17, 32).unwrap())));
}

fn training(c: &mut Criterion) {
    let (mut ds, db, _) = generate(&SyntheticConfig::default()).unwrap();
    split_fewshot(&mut ds, "type0", 0.3, 0.5, 0).unwrap();
    let cfg = TrainConfig { max_steps: 10, validate_every: 10, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("pt_rag_10_steps", |bch| {
        bch.iter_batched(|| cfg.clone(), |cfg| black_box(train(&cfg, &ds, &db).unwrap()), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, kernels, training);
criterion_main!(benches);
