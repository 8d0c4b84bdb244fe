use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nonlocal_bench::{fields, model};
use nonlocal_core::attractor::semidistance;
use nonlocal_core::{Scheme, Stepper};

fn kernel_apply(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_apply");
    for n in [256, 1024] {
        let m = model(n);
        let u = fields(&m, 1, 1.0).remove(0);
        let mut out = vec![0.0; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| m.kernel.apply_into(black_box(u.values()), &mut out))
        });
    }
    group.finish();
}

fn etd_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("etd_step");
    for n in [256, 1024] {
        let m = model(n);
        let mut u = fields(&m, 1, 1.0).remove(0).into_values();
        let mut stepper = Stepper::new(&m, Scheme::Etd, 0.01).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| stepper.step(black_box(&mut u)).unwrap())
        });
    }
    group.finish();
}

fn hausdorff(c: &mut Criterion) {
    let m = model(256);
    let a = fields(&m, 64, 1.0);
    let b = fields(&m, 64, 1.5);
    c.bench_function("semidistance_64x64_n256", |bench| {
        bench.iter(|| semidistance(black_box(&a), black_box(&b), m.space).unwrap())
    });
}

criterion_group!(benches, kernel_apply, etd_step, hausdorff);
criterion_main!(benches);
