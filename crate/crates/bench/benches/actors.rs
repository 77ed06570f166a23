use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cafx::bench::{self, Area, MixedParams};
use cafx::Runtime;

fn creation(c: &mut Criterion) {
    let rt = Runtime::new();
    let mut g = c.benchmark_group("creation");
    g.sample_size(10);
    for k in [10u32, 14] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| assert_eq!(bench::creation(&rt, k), 1 << k))
        });
    }
    g.finish();
}

fn mailbox(c: &mut Criterion) {
    let rt = Runtime::new();
    let mut g = c.benchmark_group("mailbox");
    g.sample_size(10);
    for senders in [1u64, 8] {
        g.bench_with_input(BenchmarkId::from_parameter(senders), &senders, |b, &s| {
            b.iter(|| assert_eq!(bench::mailbox(&rt, s, 10_000), s * 10_000))
        });
    }
    g.finish();
}

fn mixed(c: &mut Criterion) {
    let rt = Runtime::new();
    let mut p = MixedParams::new(4, 10, 50, 2);
    p.factor_target = 1_000_003 * 999_983;
    c.bench_function("mixed/4x10", |b| b.iter(|| bench::mixed(&rt, &p)));
}

fn mandelbrot(c: &mut Criterion) {
    let rt = Runtime::new();
    let mut g = c.benchmark_group("mandelbrot");
    g.sample_size(10);
    g.bench_function("actors/128", |b| b.iter(|| bench::mandelbrot(&rt, 128, 100, Area::default())));
    g.bench_function("sequential/128", |b| {
        b.iter(|| bench::sequential_mandelbrot(128, 100, Area::default()))
    });
    g.finish();
}

criterion_group!(benches, creation, mailbox, mixed, mandelbrot);
criterion_main!(benches);
