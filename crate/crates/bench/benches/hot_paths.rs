//! Criterion benchmarks for the numerical hot paths: batched gradients,
//! Hessian-vector products, power iteration, and the recursion evaluator.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use milr_core::autodiff::{self, Batch, LossKind, ParamVector};
use milr_core::network::{init_network, ArchSpec, InitScheme};
use milr_core::rng::Rng;
use milr_core::sharpness::{loss_hessian_top_eigenvalue, PowerIterConfig};
use milr_core::theory::{self, CorrectionMode, TheoryConfig};

fn setup(depth: usize, width: usize, batch: usize) -> (milr_core::Mlp, Batch) {
    let mut rng = Rng::from_seed(1);
    let arch = ArchSpec::constant_width(100, depth, width, 2).unwrap();
    let mlp = init_network(&arch, InitScheme::Kaiming, &mut rng).unwrap();
    let mut inputs = vec![0.0; batch * 100];
    rng.fill_standard_normal(&mut inputs);
    let labels: Vec<u32> = (0..batch).map(|i| (i % 2) as u32).collect();
    (mlp, Batch::classification(inputs, 100, labels).unwrap())
}

fn bench_grad(c: &mut Criterion) {
    let (mlp, batch) = setup(10, 160, 128);
    c.bench_function("grad depth10 width160 batch128", |b| {
        b.iter(|| autodiff::grad(&mlp, &batch, LossKind::CrossEntropy).unwrap())
    });
}

fn bench_hvp(c: &mut Criterion) {
    let (mlp, batch) = setup(5, 80, 128);
    let mut rng = Rng::from_seed(2);
    let mut v = ParamVector::zeros_like(&mlp);
    rng.fill_standard_normal(&mut v.values);
    c.bench_function("hvp depth5 width80 batch128", |b| {
        b.iter(|| autodiff::hvp(&mlp, &batch, LossKind::CrossEntropy, &v).unwrap())
    });
}

fn bench_power_iteration(c: &mut Criterion) {
    let (mlp, batch) = setup(3, 48, 64);
    c.bench_function("power iteration depth3 width48", |b| {
        b.iter_batched(
            || Rng::from_seed(3),
            |mut rng| {
                loss_hessian_top_eigenvalue(
                    &mlp,
                    &batch,
                    LossKind::CrossEntropy,
                    &PowerIterConfig::default(),
                    &mut rng,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_recursion(c: &mut Criterion) {
    let cfg = TheoryConfig::constant(64, 64, 32, 1.0);
    c.bench_function("recursion evaluate depth32", |b| {
        b.iter(|| theory::evaluate(&cfg, CorrectionMode::Exact).unwrap())
    });
}

criterion_group!(benches, bench_grad, bench_hvp, bench_power_iteration, bench_recursion);
criterion_main!(benches);
