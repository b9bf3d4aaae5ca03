use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use shapepu_bench::{phantom_example, tensor};
use shapepu_core::mixture::inputs_from_probmap;
use shapepu_core::train::{augmentation_for, image_gradients};
use shapepu_core::{
    em_estimate, hausdorff, keep_largest_component, predict, Graph, Phase, SegModel, TrainConfig,
};

fn conv(c: &mut Criterion) {
    let input = tensor(&[1, 16, 96, 96], 1);
    let kernel = tensor(&[32, 16, 3, 3], 2);
    let bias = tensor(&[32], 3);
    c.bench_function("conv2d 16->32 96x96 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let k = g.param(kernel.clone());
            let bb = g.param(bias.clone());
            black_box(g.conv2d(x, k, bb).unwrap())
        })
    });
    c.bench_function("conv2d 16->32 96x96 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.param(input.clone());
            let k = g.param(kernel.clone());
            let bb = g.param(bias.clone());
            let y = g.conv2d(x, k, bb).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(k))
        })
    });
}

fn training_step(c: &mut Criterion) {
    let ex = phantom_example(0);
    let model = SegModel::new(4, 0).unwrap();
    let cfg = TrainConfig::default();
    let alpha = shapepu_core::train::estimate_ratios(&model, &ex, &cfg).unwrap();
    let aug = augmentation_for(&ex, &cfg, 0, 0).unwrap();
    c.bench_function("full loss gradients, one 96x96 image", |b| {
        b.iter(|| {
            black_box(
                image_gradients(&model, &ex, Some(&alpha), Some(&aug), &cfg, Phase::Full).unwrap(),
            )
        })
    });
}

fn mixture(c: &mut Criterion) {
    let ex = phantom_example(1);
    let model = SegModel::new(4, 0).unwrap();
    let probs = model.forward(&ex.image).unwrap();
    let inputs = inputs_from_probmap(probs.data(), 4, &ex.scribble).unwrap();
    c.bench_function("em_estimate 96x96 unlabeled", |b| {
        b.iter(|| black_box(em_estimate(&inputs, 1e-6, 100).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let ex = phantom_example(2);
    let model = SegModel::new(4, 0).unwrap();
    let pred = predict(&model, &ex.image, false).unwrap();
    c.bench_function("hausdorff 96x96", |b| {
        b.iter(|| black_box(hausdorff(&pred, &ex.mask, 2)))
    });
    c.bench_function("keep_largest_component 96x96", |b| {
        b.iter(|| black_box(keep_largest_component(&pred, 3)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, training_step, mixture, metrics
}
criterion_main!(benches);
