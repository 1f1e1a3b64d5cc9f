use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kag_core::minors::{MinorCaps, MinorPlan};
use kag_core::mlp::{init_params, layer_jacobian, train, Layer, TrainConfig};
use kag_core::mnist::{ImageSet, LabelSet, IMAGE_PIXELS};
use kag_core::participation_ratio;

fn input(seed: u64) -> Vec<f64> {
    // Cheap deterministic pseudo-image.
    (0..IMAGE_PIXELS)
        .map(|i| (((i as u64).wrapping_mul(2654435761) ^ seed) % 255) as f64 / 255.0)
        .collect()
}

fn jacobians(c: &mut Criterion) {
    let mut g = c.benchmark_group("jacobian");
    let x = input(1);
    for h in [64, 256] {
        let p = init_params(h, 0).unwrap();
        for layer in [Layer::L1, Layer::L2] {
            g.bench_with_input(BenchmarkId::new(layer.as_str(), h), &h, |b, _| {
                b.iter(|| layer_jacobian(black_box(&p), black_box(&x), layer))
            });
        }
    }
    g.finish();
}

fn minors(c: &mut Criterion) {
    let mut g = c.benchmark_group("minors");
    g.sample_size(10);
    let p = init_params(128, 0).unwrap();
    let j = layer_jacobian(&p, &input(2), Layer::L1);
    let caps = MinorCaps {
        pair_budget: Some(20_000),
        ..MinorCaps::default()
    };
    for k in 1..=3 {
        let plan = MinorPlan::sample(128, IMAGE_PIXELS, k, caps, 42, None).unwrap();
        g.bench_with_input(BenchmarkId::new("evaluate", k), &k, |b, _| {
            b.iter(|| plan.evaluate(j.entries.view(), 500).unwrap())
        });
    }
    let plan = MinorPlan::sample(128, IMAGE_PIXELS, 2, caps, 42, None).unwrap();
    let values = plan.evaluate(j.entries.view(), 500).unwrap();
    g.bench_function("participation_ratio", |b| {
        b.iter(|| participation_ratio(black_box(&values)).unwrap())
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    let n = 1024;
    let pixels: Vec<f64> = (0..n as u64).flat_map(input).collect();
    let images = ImageSet::from_pixels(pixels).unwrap();
    let labels = LabelSet::from_labels((0..n).map(|i| (i % 10) as u8).collect()).unwrap();
    for augment in [false, true] {
        let cfg = TrainConfig {
            epochs: 1,
            eval_every: 1,
            augment,
            ..TrainConfig::default()
        };
        let name = if augment {
            "epoch_1024_augmented"
        } else {
            "epoch_1024"
        };
        g.bench_function(name, |b| {
            b.iter(|| train(init_params(64, 0).unwrap(), &images, &labels, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, jacobians, minors, training);
criterion_main!(benches);
