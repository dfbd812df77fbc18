use std::hint::black_box;

use candle_core::{DType, Device, Tensor, Var};
use contrakd::data::make_synthetic_dataset;
use contrakd::losses::{dice_bce_loss, info_nce_loss, pmd_loss};
use contrakd::metrics::confusion_counts;
use contrakd::models::{build_model, ModelConfig, TapNetwork};
use contrakd::nn::conv::conv3x3;
use contrakd::nn::Mode;
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;

fn conv(c: &mut Criterion) {
    let dev = Device::Cpu;
    let x = Var::from_tensor(&Tensor::rand(-1f32, 1., (8, 16, 64, 64), &dev).unwrap()).unwrap();
    let w = Var::from_tensor(&Tensor::rand(-1f32, 1., (16, 16, 3, 3), &dev).unwrap()).unwrap();
    c.bench_function("conv3x3 fwd 8x16x64x64", |b| b.iter(|| conv3x3(black_box(&x), &w).unwrap()));
    c.bench_function("conv3x3 fwd+bwd 8x16x64x64", |b| {
        b.iter(|| conv3x3(&x, &w).unwrap().sum_all().unwrap().backward().unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let dev = Device::Cpu;
    let logits = Tensor::randn(0f32, 1., (8, 1, 64, 64), &dev).unwrap();
    let other = Tensor::randn(0f32, 1., (8, 1, 64, 64), &dev).unwrap();
    let target = Tensor::rand(0f32, 1., (8, 1, 64, 64), &dev).unwrap().round().unwrap();
    let za = Tensor::randn(0f32, 1., (32, 128), &dev).unwrap();
    let zb = Tensor::randn(0f32, 1., (32, 128), &dev).unwrap();
    c.bench_function("dice_bce 8x64x64", |b| b.iter(|| dice_bce_loss(&logits, &target).unwrap()));
    c.bench_function("info_nce B=32 d=128", |b| b.iter(|| info_nce_loss(&za, &zb, 0.07).unwrap()));
    c.bench_function("pmd 8x64x64", |b| b.iter(|| pmd_loss(&logits, &other, 1.0).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let pred = Array2::from_shape_fn((256, 256), |(r, q)| u8::from((r * 7 + q * 3) % 5 < 2));
    let gt = Array2::from_shape_fn((256, 256), |(r, q)| u8::from((r + q) % 3 == 0));
    c.bench_function("confusion 256x256", |b| b.iter(|| confusion_counts(black_box(&pred), &gt).unwrap()));
}

fn forward(c: &mut Criterion) {
    let data = make_synthetic_dataset(8, (64, 64), 0).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (x, _) = data.batch(&idx, &Device::Cpu).unwrap();
    let x = x.to_dtype(DType::F32).unwrap();
    let s1 = build_model(&ModelConfig::student_s1(), 0).unwrap();
    let t = build_model(&ModelConfig::teacher().with_base_channels(8), 0).unwrap();
    c.bench_function("S1 eval forward 8x64x64", |b| b.iter(|| s1.forward_with_taps(&x, Mode::Eval).unwrap()));
    c.bench_function("teacher(b=8) train fwd+bwd 8x64x64", |b| {
        b.iter(|| {
            let out = t.forward_with_taps(&x, Mode::Train).unwrap();
            out.seg_logits.sum_all().unwrap().backward().unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, losses, metrics, forward
}
criterion_main!(benches);
