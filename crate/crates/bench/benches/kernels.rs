use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ksformer_core::fft::{irfft2, rfft2};
use ksformer_core::mkra::{mkra_apply, MkraConfig, MkraWeights, DEFAULT_WINDOW_SIDES};
use ksformer_core::ops::{conv2d, Padding};
use ksformer_core::{KsformerModel, NetworkConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d_3x3");
    for (side, ch) in [(64, 8), (32, 16), (16, 32)] {
        let x = Tensor::randn([side, side, ch], 1.0, &mut rng);
        let w = Tensor::randn([3, 3, ch, ch], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{side}x{side}x{ch}")), &(x, w), |b, (x, w)| {
            b.iter(|| conv2d(black_box(x), black_box(w), 1, Padding::Same).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = MkraConfig::new(32, 16, DEFAULT_WINDOW_SIDES, None).unwrap();
    let w = MkraWeights::init(&cfg, &mut rng);
    let x = Tensor::randn([16, 16, 32], 1.0, &mut rng);
    let mut group = c.benchmark_group("mkra_16x16x32");
    group.bench_function("routed", |b| b.iter(|| mkra_apply(black_box(&x), &cfg, &w).unwrap()));
    let dense = cfg.dense();
    group.bench_function("dense", |b| b.iter(|| mkra_apply(black_box(&x), &dense, &w).unwrap()));
    group.finish();
}

fn fft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("rfft2_round_trip");
    for side in [16, 64] {
        let x = Tensor::rand_uniform([side, side], -1.0, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| {
            b.iter(|| irfft2(&rfft2(black_box(x)).unwrap(), side, side).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = KsformerModel::new(NetworkConfig::default(), 0).unwrap();
    let hazy = Tensor::rand_uniform([64, 64, 3], 0.0, 1.0, &mut rng);
    c.bench_function("infer_64x64_default", |b| b.iter(|| model.infer(black_box(&hazy)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, attention, fft, forward
}
criterion_main!(benches);
