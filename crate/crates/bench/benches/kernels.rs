use std::hint::black_box;

use commonspace::agents::Encoder;
use commonspace::negotiator::Negotiator;
use commonspace::nn::Param;
use commonspace::training::ExperimentConfig;
use commonspace::{EncoderArch, Tape};
use commonspace_bench::{features, rng};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let x = features(8, 16, 32, 32, 1);
    for (name, cin, cout, k, groups) in [("dense3x3", 16, 16, 3, 1), ("depthwise3x3", 16, 16, 3, 16), ("pointwise", 16, 32, 1, 1)] {
        let w = Param::new(features(cout, cin / groups, k, k, 2));
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let y = tape.constant(x.clone()).conv2d(tape.param(&w), None, 1, k / 2, groups);
                black_box(y.value());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let y = tape.constant(x.clone()).conv2d(tape.param(&w), None, 1, k / 2, groups);
                black_box(tape.backward(y.square().mean()));
            })
        });
    }
    group.finish();
}

fn encoders(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder");
    let x = features(8, 1, 48, 48, 3);
    for arch in [EncoderArch::ConvA, EncoderArch::ConvB, EncoderArch::ConvC, EncoderArch::ConvD] {
        let enc = Encoder::new(arch, 16, &mut rng(4));
        group.bench_function(format!("{arch:?}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                black_box(enc.forward(&tape, tape.constant(x.clone())).value());
            })
        });
    }
    group.finish();
}

fn negotiator(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk();
    let s = cfg.standard;
    let neg = Negotiator::new(s, cfg.pyramid, &mut rng(5)).unwrap();
    let us: Vec<_> = (0..3).map(|m| features(8, s.channels, s.height, s.width, 10 + m)).collect();
    c.bench_function("negotiator/forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let vars: Vec<_> = us.iter().map(|u| tape.input(u.clone(), true)).collect();
            let p = neg.negotiate(&tape, &vars).unwrap().p;
            black_box(tape.backward(p.square().mean()));
        })
    });
}

criterion_group!(benches, conv, encoders, negotiator);
criterion_main!(benches);
