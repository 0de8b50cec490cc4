use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use grid_bench::scene_step;
use grid_core::grid::{ablation_step, Adam, StepGraph};
use grid_core::{LambdaSpec, Mode};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let (model, batch, eps) = scene_step(128);
    c.bench_function("step_graph_build_128", |b| {
        b.iter(|| black_box(StepGraph::build(&model, &batch, &eps).unwrap().report().len()))
    });
}

fn steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_128");
    let (model, batch, eps) = scene_step(128);
    for mode in Mode::ALL {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            let mut m = model.clone();
            let mut opt = Adam::new(1e-3);
            b.iter(|| black_box(ablation_step(&mut m, &batch, mode, LambdaSpec::new(20).unwrap(), &eps, &mut opt).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, steps);
criterion_main!(benches);
