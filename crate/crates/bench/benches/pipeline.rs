use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use inrmark_core::codec::{Decoder, DecoderConfig};
use inrmark_core::distortion::{apply_distortion, DistortionSpec};
use inrmark_core::finetune::{finetune_step, FinetuneConfig, SchedulePair};
use inrmark_core::optim::{Adam, AdamConfig};
use inrmark_core::sampler::{sample_image, sample_image_tape};
use inrmark_core::synth::synth_image;
use inrmark_core::{seeded_rng, BitMessage, InrConfig, InrParams};

fn small_inr() -> InrParams {
    InrParams::init(&InrConfig {
        hidden_width: 128,
        ..InrConfig::default()
    })
    .expect("valid config")
}

fn sampling(c: &mut Criterion) {
    let params = small_inr();
    let mut group = c.benchmark_group("sample");
    for side in [64usize, 112] {
        group.bench_with_input(BenchmarkId::new("forward", side), &side, |b, &s| {
            b.iter(|| sample_image(&params, s, s).unwrap())
        });
        let ones = inrmark_core::Image::filled(side, side, 1.0);
        group.bench_with_input(BenchmarkId::new("forward_backward", side), &side, |b, &s| {
            b.iter(|| {
                let (_, tape) = sample_image_tape(&params, s, s).unwrap();
                tape.backward(&params, &ones).unwrap()
            })
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let cfg = DecoderConfig {
        message_bits: 16,
        canonical_size: Some(64),
        ..DecoderConfig::default()
    };
    let decoder = Decoder::init(&cfg, 0).unwrap();
    let image = synth_image(64, 64, 1);
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    group.bench_function("aligned_64", |b| b.iter(|| decoder.decode_aligned(&image).unwrap()));
    group.bench_function("synchronized_64", |b| b.iter(|| decoder.decode(&image).unwrap()));
    group.finish();
}

fn distortions(c: &mut Criterion) {
    let image = synth_image(128, 128, 2);
    let mut rng = seeded_rng(3);
    let mut group = c.benchmark_group("distortion");
    for spec in [
        DistortionSpec::jpeg(50),
        DistortionSpec::median_filter(3),
        DistortionSpec::resize(0.5),
        DistortionSpec::gaussian_noise(0.05),
    ] {
        group.bench_function(spec.to_string(), |b| {
            b.iter(|| apply_distortion(&image, &spec, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn finetuning(c: &mut Criterion) {
    let f_im = small_inr();
    let decoder = Decoder::init(
        &DecoderConfig {
            message_bits: 16,
            canonical_size: Some(64),
            ..DecoderConfig::default()
        },
        0,
    )
    .unwrap();
    let message = BitMessage::random(16, &mut seeded_rng(4)).unwrap();
    let config = FinetuneConfig::default();
    let pair = SchedulePair {
        resolution: (80, 80),
        distortion: DistortionSpec::gaussian_noise(0.05),
    };
    let mut group = c.benchmark_group("finetune");
    group.sample_size(10);
    group.bench_function("step_80", |b| {
        let mut f_wm = f_im.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-4));
        let mut rng = seeded_rng(5);
        b.iter(|| finetune_step(&mut f_wm, &f_im, &decoder, &pair, &message, &config, &mut adam, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sampling, decoding, distortions, finetuning);
criterion_main!(benches);
