//! Criterion suite over the data-parallel kernels.
//!
//! Group names carry the active execution mode, so running the suite twice —
//! once with default features (rayon) and once with `--no-default-features`
//! (sequential) — produces directly comparable entries:
//!
//! ```text
//! cargo bench -p salg-core
//! cargo bench -p salg-core --no-default-features
//! ```

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use salg_core::backbone::Model;
use salg_core::config::ModelConfig;
use salg_core::segmentation::{assign_tokens, estimate_region_means, SegmentationConfig};
use salg_core::tensor::{Graph, Tensor};
use salg_core::train::random_image;

fn mode() -> &'static str {
    if salg_core::par::PARALLEL {
        "parallel"
    } else {
        "sequential"
    }
}

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![h, w, c], |_| rng.random_range(-1.0..1.0))
}

fn bench_segmentation(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("segmentation/{}", mode()));
    let map = random_map(56, 56, 96, 7);
    let cfg = SegmentationConfig::new(7, 1).unwrap();
    group.bench_function("means_56x56x96", |b| {
        b.iter(|| estimate_region_means(black_box(&map), &cfg).unwrap())
    });
    let means = estimate_region_means(&map, &cfg).unwrap();
    let valid = vec![true; 56 * 56];
    group.bench_function("assign_56x56x96", |b| {
        b.iter(|| assign_tokens(black_box(&map), &means, &cfg, &valid).unwrap())
    });
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("matmul/{}", mode()));
    let a = random_map(64, 82, 82, 1);
    let b = random_map(64, 82, 32, 2);
    group.bench_function("batched_64x82x82_by_82x32", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let av = g.input(a.clone());
            let bv = g.input(b.clone());
            g.matmul(black_box(av), black_box(bv)).unwrap()
        })
    });
    group.finish();
}

fn bench_stage(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("stage/{}", mode()));
    group.sample_size(10);
    let cfg = ModelConfig { input_size: 64, ..ModelConfig::micro() };
    let (model, store) = Model::init(&cfg, 3).unwrap();
    let image = random_image(64, 11);
    group.bench_function("micro_forward_64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            model.forward(&mut g, &store, black_box(&image)).unwrap()
        })
    });
    group.bench_function("micro_forward_backward_64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &store, black_box(&image)).unwrap();
            let loss = g.cross_entropy(fwd.logits, 0).unwrap();
            g.backward(loss).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_segmentation, bench_matmul, bench_stage);
criterion_main!(benches);
