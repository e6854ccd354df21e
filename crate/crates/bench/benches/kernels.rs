use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssiu_core::blocks::{AttentionMode, Esam, EsamConfig};
use ssiu_core::hqs::suite::{instance, ista_params};
use ssiu_core::hqs::{hqs_solve, lasso_cd};
use ssiu_core::nn::{kernels, ParamStore, Tensor};
use ssiu_core::train::{total_loss_with_grad, FftLossKind};

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    let x = random(0, &[64, 48, 48]);
    let bias = random(1, &[64]);
    for (k, groups) in [(1, 1), (3, 1), (3, 64)] {
        let w = random(2, &[64, 64 / groups, k, k]);
        g.bench_with_input(BenchmarkId::new(format!("k{k}"), format!("groups{groups}")), &w, |b, w| {
            b.iter(|| kernels::conv2d(black_box(&x), w, &bias, groups))
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("esam");
    let cfg = EsamConfig {
        channels: 64,
        pool_kernel: 2,
        pool_stride: 2,
        block_size: 8,
        overlap: 2,
        num_heads: 4,
    };
    let x = random(3, &[64, 48, 48]).into_dimensionality().unwrap();
    for mode in [AttentionMode::Sparse, AttentionMode::Dense] {
        let mut store = ParamStore::new();
        let e = Esam::new(&mut store, "e", &cfg, mode, &mut ChaCha8Rng::seed_from_u64(4));
        g.bench_function(format!("{mode:?}").to_lowercase(), |b| {
            b.iter(|| e.apply(&store, black_box(&x)).unwrap())
        });
    }
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let mut g = c.benchmark_group("lasso");
    let inst = instance(7).unwrap();
    let params = ista_params(&inst.problem, inst.lam);
    let zero = Array1::zeros(inst.problem.dim());
    g.bench_function("hqs_solve", |b| {
        b.iter(|| hqs_solve(&inst.problem, &params, black_box(&zero)).unwrap())
    });
    g.bench_function("coordinate_descent", |b| {
        b.iter(|| lasso_cd(inst.problem.k(), black_box(&inst.problem.y), inst.lam).unwrap())
    });
    g.finish();
}

fn loss(c: &mut Criterion) {
    let pred = random(5, &[3, 96, 96]).into_dimensionality().unwrap();
    let target = random(6, &[3, 96, 96]).into_dimensionality().unwrap();
    c.bench_function("loss/l1_plus_fft_96", |b| {
        b.iter(|| total_loss_with_grad(black_box(&pred), &target, 0.01, FftLossKind::Complex).unwrap())
    });
}

criterion_group!(benches, conv, attention, solvers, loss);
criterion_main!(benches);
