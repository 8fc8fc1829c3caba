use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lmvae_bench::{rng, uniform};
use lmvae_core::autodiff::Graph;
use lmvae_core::data::ImageShape;
use lmvae_core::metrics::ssim;
use lmvae_core::mixture::{dirichlet_parameters, sample_mixing_weights};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [64, 200, 784] {
        let mut r = rng(1);
        let a = uniform(&mut r, 64, n);
        let b = uniform(&mut r, n, 200);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let av = g.constant(a.clone());
                let bv = g.constant(b.clone());
                let y = g.matmul(av, bv).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.value(s).data()[0])
            })
        });
    }
    group.finish();
}

fn dirichlet(c: &mut Criterion) {
    let flags = [true, true, false, false];
    let a = dirichlet_parameters(&flags, 1e-3).unwrap();
    let mut r = rng(2);
    c.bench_function("dirichlet_k4", |b| {
        b.iter(|| black_box(sample_mixing_weights(&a, &mut r).unwrap()))
    });
}

fn image_metrics(c: &mut Criterion) {
    let mut r = rng(3);
    let x = uniform(&mut r, 2, 784);
    let shape = ImageShape::new(28, 28, 1);
    c.bench_function("ssim_28x28", |b| {
        b.iter(|| black_box(ssim(x.row(0), x.row(1), shape).unwrap()))
    });
}

criterion_group!(benches, matmul, dirichlet, image_metrics);
criterion_main!(benches);
