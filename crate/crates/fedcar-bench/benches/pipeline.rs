//! Hot-path benchmarks: loss with gradients, the privacy transform,
//! federated aggregation, and the wire codec.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedcar_core::data::{gen_synthetic, Sample};
use fedcar_core::dp::{dp_transform, init_dp, DpConfig, DpMode};
use fedcar_core::encoder::{FrozenEncoder, Pooling};
use fedcar_core::model::loss_and_gradients;
use fedcar_core::params::{ModelShape, TrainMode};
use fedcar_core::rng::SplitMix64;
use fedcar_core::wire::{decode, encode, model_message, parse_model_message, MsgType};
use std::hint::black_box;

fn medium_setup() -> (FrozenEncoder, fedcar_core::ModelParams, Vec<Sample>) {
    let enc = FrozenEncoder::synthetic(7, 16, 32, 2, 8, Pooling::Mean);
    let shape = ModelShape {
        d_emb: 16,
        d_hidden: 32,
        n_classes: 4,
        pre_classifier: false,
        dropout_rate: 0.0,
        mode: TrainMode::AdapterAndClassifier,
    };
    let model = shape.init_model(3);
    let batch = gen_synthetic(2, 4, 16, 0.5, 11).samples;
    (enc, model, batch)
}

fn bench_gradients(c: &mut Criterion) {
    let (enc, model, batch) = medium_setup();
    c.bench_function("loss_and_gradients(batch=8, joint 16x32)", |b| {
        b.iter(|| loss_and_gradients(black_box(&model), &enc, black_box(&batch), false, 0).unwrap())
    });
}

fn bench_privacy_transform(c: &mut Criterion) {
    let (_, model, _) = medium_setup();
    let dim = model.trainable_len();
    let mut rng = SplitMix64::new(5);
    let delta: Vec<f64> = (0..dim).map(|_| rng.next_gaussian() * 0.01).collect();
    let cfg = DpConfig {
        mode: DpMode::Adaptive { c0: 1.0, beta: 0.1, gamma: 0.9, z: 0.1 },
        warmup_rounds: 0,
        per_iteration: false,
    };
    let state = init_dp(&cfg, 2).unwrap();
    c.bench_function(&format!("dp_transform(clip+noise, {dim} params)"), |b| {
        b.iter_batched(
            || SplitMix64::new(9),
            |mut r| dp_transform(black_box(&model), black_box(&delta), &cfg, &state, 0, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_aggregate(c: &mut Criterion) {
    let (_, model, _) = medium_setup();
    let updates: Vec<(f64, fedcar_core::ModelParams)> = (0..4u64)
        .map(|i| {
            let mut m = model.clone();
            let mut r = SplitMix64::new(i);
            let delta: Vec<f64> =
                (0..m.trainable_len()).map(|_| r.next_gaussian() * 0.01).collect();
            m.add_delta(&delta);
            (0.25, m)
        })
        .collect();
    c.bench_function("aggregate(4 clients)", |b| {
        b.iter(|| fedcar_core::fed::aggregate(black_box(&model), black_box(&updates)).unwrap())
    });
}

fn bench_wire_codec(c: &mut Criterion) {
    let (_, model, _) = medium_setup();
    c.bench_function("model frame encode+decode round trip", |b| {
        b.iter(|| {
            let msg = model_message(MsgType::GlobalModel, 3, black_box(&model)).unwrap();
            let bytes = encode(&msg);
            let back = decode(&bytes).unwrap();
            parse_model_message(&back, MsgType::GlobalModel, TrainMode::AdapterAndClassifier, 0.0)
                .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_gradients,
    bench_privacy_transform,
    bench_aggregate,
    bench_wire_codec
);
criterion_main!(benches);
