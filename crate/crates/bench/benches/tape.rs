use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use grid_bench::random_matrix;
use grid_core::Tape;
use std::hint::black_box;

fn matmul_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_backward");
    for n in [32usize, 128] {
        let a = random_matrix(n, 64, 1).with_requires_grad(true);
        let b = random_matrix(64, n, 2).with_requires_grad(true);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(&a), t.leaf(&b));
                let m = t.matmul(x, y).unwrap();
                let r = t.relu(m);
                let l = t.mean(r);
                black_box(t.grad_wrt(l, &[x, y]).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul_backward);
criterion_main!(benches);
