use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvcnn_bench::random_matrix;
use mvcnn_core::synthetic::{random_model, token_ids};
use mvcnn_core::{kmax_pool, wide_conv, Mode, NetworkConfig, ParameterSet};

fn bench_wide_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("wide_conv");
    for &len in &[10usize, 50, 200] {
        let map = random_matrix(50, len, 1);
        let filter = random_matrix(50, 5, 2);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| wide_conv(black_box(&map), black_box(&filter)).unwrap())
        });
    }
    group.finish();
}

fn bench_kmax(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmax_pool");
    for &len in &[20usize, 100, 500] {
        let map = random_matrix(50, len, 3);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| kmax_pool(black_box(&map), 5).unwrap())
        });
    }
    group.finish();
}

fn bench_network(c: &mut Criterion) {
    let cfg = NetworkConfig {
        channels: 2,
        dim: 50,
        filter_sizes: vec![3, 5],
        kernels_per_size: 5,
        hidden_dim: 50,
        ..Default::default()
    };
    let mut model = random_model(cfg, 1000, 0.1, 7).unwrap();
    let tokens = token_ids(25, 1000, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    c.bench_function("predict/len25", |b| b.iter(|| model.predict(black_box(&tokens)).unwrap()));
    c.bench_function("loss_and_backward/len25", |b| {
        b.iter(|| {
            model.zero_grads();
            model
                .loss_and_backward(black_box(&tokens), 1, Mode::Train, 1.0, &mut rng)
                .unwrap()
        })
    });
}

criterion_group!(benches, bench_wide_conv, bench_kmax, bench_network);
criterion_main!(benches);
