//! Throughput benchmarks for the hot paths: rendering, oracle measurement,
//! subject classification, and one denoiser forward pass.

use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use vat_core::backbone::Vocab;
use vat_core::ckpt::{Model, ModelConfig};
use vat_core::rng::rng_seeded;
use vat_core::synth::{
    apply_attribute, classify_subject, measure_attribute, render_subject, CalibConstants,
    TemplateBank,
};
use vat_core::taxonomy::{AttributeClass, Taxonomy};

fn bench_render(c: &mut Criterion) {
    let tax = Taxonomy::load_default().unwrap();
    let mut rng = rng_seeded(1);
    c.bench_function("render_subject_32", |b| {
        b.iter(|| render_subject(&tax, "circle", 32, &mut rng).unwrap())
    });
    let attr = tax.instantiate("hue_red", &mut rng).unwrap();
    let base = render_subject(&tax, "circle", 32, &mut rng).unwrap();
    c.bench_function("apply_attribute_color", |b| {
        b.iter(|| apply_attribute(&tax, &base, "circle", &attr).unwrap())
    });
}

fn bench_oracles(c: &mut Criterion) {
    let tax = Taxonomy::load_default().unwrap();
    let calib = CalibConstants::load_default();
    let mut rng = rng_seeded(2);
    let attr = tax.instantiate("hue_red", &mut rng).unwrap();
    let base = render_subject(&tax, "square", 32, &mut rng).unwrap();
    let out = apply_attribute(&tax, &base, "square", &attr).unwrap();
    c.bench_function("measure_color", |b| {
        b.iter(|| measure_attribute(&out.image, AttributeClass::Color, Some(&out.mask), &calib))
    });
    let bank = TemplateBank::build(&tax, 32).unwrap();
    c.bench_function("classify_subject", |b| {
        b.iter(|| classify_subject(&out.image, &bank))
    });
}

fn bench_model(c: &mut Criterion) {
    let tax = Taxonomy::load_default().unwrap();
    let vocab = Vocab::build(&tax);
    let mut cfg = ModelConfig::with_vocab(vocab.len());
    cfg.backbone.base_channels = 16;
    cfg.backbone.ch_mults = vec![1, 2];
    cfg.backbone.blocks_per_stage = 1;
    cfg.backbone.attn_dim = 32;
    cfg.adapter.attn_dim = 32;
    cfg.adapter.width = 32;
    cfg.adapter.enc_channels = vec![8, 16, 32];
    let model = Model::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let dev = Device::Cpu;
    let x = Tensor::randn(0.0f32, 1.0, (1, 3, 32, 32), &dev).unwrap();
    let t = Tensor::from_vec(vec![100u32], 1, &dev).unwrap();
    let tokens = Tensor::zeros((1, 8), DType::U32, &dev).unwrap();
    c.bench_function("denoiser_forward_pilot", |b| {
        b.iter(|| model.backbone.forward(&x, &t, &tokens, None).unwrap())
    });
    let tags = Tensor::zeros((1, 8), DType::U32, &dev).unwrap();
    c.bench_function("adapter_extract_pilot", |b| {
        b.iter(|| model.adapter.extract(&x, &tags).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_render, bench_oracles, bench_model
}
criterion_main!(benches);
