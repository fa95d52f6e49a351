use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use p3d_core::matching::dense_nn_matches;
use p3d_core::objectives::{train_probe, OptimConfig, TrainConfig};
use p3d_core::probes::{init_probe, used_blocks};
use p3d_core::synthetic::{probe_scene, ProbeSceneConfig};
use p3d_core::tensorcore::Graph;
use p3d_core::{FeatureGrid, ModelFamily, ProbeConfig, ProbeTask, Tensor};

fn pseudo(n: usize, salt: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let x = (i ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

fn conv2d(c: &mut Criterion) {
    let x = Tensor::new(vec![1, 32, 32, 32], pseudo(32 * 32 * 32, 1)).unwrap();
    let w = Tensor::new(vec![32, 32, 3, 3], pseudo(32 * 32 * 9, 2)).unwrap();
    let b = Tensor::new(vec![32], pseudo(32, 3)).unwrap();
    c.bench_function("conv2d 3x3 32ch 32x32 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f64>::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let loss = g.sum(y);
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn grid(h: usize, w: usize, c: usize, salt: u64) -> FeatureGrid {
    let data = pseudo(h * w * c, salt).into_iter().map(|v| v as f32).collect();
    FeatureGrid::new("bench", 0, (h, w, c), data, (w * 14, h * 14)).unwrap()
}

fn matching(c: &mut Criterion) {
    let (a, b) = (grid(32, 32, 64, 4), grid(32, 32, 64, 5));
    c.bench_function("dense_nn_matches 32x32x64", |bench| {
        bench.iter(|| black_box(dense_nn_matches(&a, &b, None, None).unwrap()))
    });
}

fn train_epoch(c: &mut Criterion) {
    let scene = ProbeSceneConfig::default();
    let blocks = used_blocks(ModelFamily::Encoder);
    let samples: Vec<_> = probe_scene(&scene, 0, 4)
        .unwrap()
        .iter()
        .map(|img| img.probe_sample(ProbeTask::Depth, &blocks).unwrap())
        .collect();
    let probe = ProbeConfig::new(ProbeTask::Depth, [scene.channels; 3], 32, ModelFamily::Encoder);
    let config = TrainConfig {
        optim: OptimConfig {
            total_epochs: 1,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    c.bench_function("depth probe epoch, 4 images, hidden 32", |bench| {
        bench.iter(|| black_box(train_probe(&samples, probe.clone(), &config).unwrap()))
    });
    c.bench_function("depth probe init", |bench| {
        bench.iter_batched(
            || probe.clone(),
            |p| black_box(init_probe::<f32>(p, 0).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv2d, matching, train_epoch);
criterion_main!(benches);
