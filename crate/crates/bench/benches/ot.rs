use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wafl_bench::cloud;
use wafl_core::ot::{cost_matrix, exact_w_small, hungarian, sinkhorn_w, GroundMetric};
use wafl_core::OtConfig;

fn bench_hungarian(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    for n in [8, 32, 64] {
        let (p, q) = (cloud(n, 3, 1), cloud(n, 3, 2));
        let cost = cost_matrix(&p.points, &q.points, 2, GroundMetric::Euclidean);
        g.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| b.iter(|| hungarian(black_box(cost))));
    }
    g.finish();
}

fn bench_exact(c: &mut Criterion) {
    let (p, q) = (cloud(32, 3, 3), cloud(32, 3, 4));
    c.bench_function("exact_w2/32", |b| b.iter(|| exact_w_small(black_box(&p), black_box(&q), 2).unwrap()));
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinkhorn");
    g.sample_size(20);
    for (n, reg) in [(32, 1e-2), (32, 1e-3), (128, 1e-2), (128, 1e-3)] {
        let (p, q) = (cloud(n, 3, 5), cloud(n, 3, 6));
        let cfg = OtConfig::default().with_reg(reg);
        g.bench_function(BenchmarkId::new(format!("reg={reg}"), n), |b| {
            b.iter(|| sinkhorn_w(black_box(&p), black_box(&q), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_hungarian, bench_exact, bench_sinkhorn);
criterion_main!(benches);
