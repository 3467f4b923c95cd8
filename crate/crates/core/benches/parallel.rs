//! Parallel vs sequential throughput of the batch operations.
//!
//! Each group runs the same closure twice: once on the global rayon pool and
//! once inside `par::sequential`, which pins it to a single thread. Building
//! with `--no-default-features` makes both variants sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hdrcm_core::datagen::{make_pairs, PairConfig, SceneConfig};
use hdrcm_core::metrics::{evaluate_batch, MetricConfig};
use hdrcm_core::{compute_masks, par, MaskConfig};
use std::hint::black_box;

fn pair_cfg() -> PairConfig {
    PairConfig {
        scene: SceneConfig::with_size(64, 64),
        ..PairConfig::default()
    }
}

fn bench_datagen(c: &mut Criterion) {
    let cfg = pair_cfg();
    let mut g = c.benchmark_group("make_pairs_16");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", 16), |b| {
        b.iter(|| make_pairs(black_box(&cfg), 1, 16).unwrap())
    });
    g.bench_function(BenchmarkId::new("sequential", 16), |b| {
        b.iter(|| par::sequential(|| make_pairs(black_box(&cfg), 1, 16).unwrap()))
    });
    g.finish();
}

fn bench_masks(c: &mut Criterion) {
    let pairs = make_pairs(&pair_cfg(), 2, 32).unwrap();
    let ldrs: Vec<_> = pairs.into_iter().map(|p| p.y0).collect();
    let cfg = MaskConfig::default();
    let run = || par::map(&ldrs, |y| compute_masks(y, &cfg).unwrap());
    let mut g = c.benchmark_group("masks_32");
    g.bench_function("parallel", |b| b.iter(|| black_box(run())));
    g.bench_function("sequential", |b| b.iter(|| par::sequential(|| black_box(run()))));
    g.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let pairs = make_pairs(&pair_cfg(), 3, 16).unwrap();
    let scored: Vec<_> = pairs
        .iter()
        .map(|p| (p.hdr.map(|v| v * 1.1 + 0.01), p.hdr.clone()))
        .collect();
    let cfg = MetricConfig::default();
    let mut g = c.benchmark_group("evaluate_16");
    g.sample_size(20);
    g.bench_function("parallel", |b| {
        b.iter(|| evaluate_batch(black_box(&scored), &cfg).unwrap())
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::sequential(|| evaluate_batch(black_box(&scored), &cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bench_datagen, bench_masks, bench_metrics);
criterion_main!(benches);
