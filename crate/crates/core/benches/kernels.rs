//! Rayon pool against a one-thread pool on the hot paths. Build with
//! `--no-default-features` to measure the sequential fallback instead of the
//! pool; the `sequential` entries then coincide with `parallel`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmctp_core::ingest::TIME_FEATURES;
use mmctp_core::model::{Batch, Model, ModelConfig};
use mmctp_core::numerics::kernels::{conv1d_forward, gemm, ConvDims};
use mmctp_core::numerics::{par, Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape, values(rng, shape.iter().product())).unwrap()
}

fn batch(c: &ModelConfig, s: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        inputs: tensor(rng, &[s, c.m, c.vars]),
        input_time: tensor(rng, &[s, c.m, TIME_FEATURES]),
        future_time: tensor(rng, &[s, c.n, TIME_FEATURES]),
        targets: tensor(rng, &[s, c.n, c.vars]),
    }
}

/// Runs `f` once on the shared pool and once pinned to one thread.
fn both(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(&mut f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| par::single_threaded(|| b.iter(&mut f)));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 384;
    let (a, b) = (values(&mut rng, n * n), values(&mut rng, n * n));
    let mut out = vec![0.0; n * n];
    both(c, "gemm_384", || {
        gemm(n, n, n, &a, false, &b, false, &mut out, false);
        black_box(&out);
    });

    let d = ConvDims { batch: 32, in_ch: 256, out_ch: 256, len: 36, kernel: 5 };
    let x = values(&mut rng, d.batch * d.in_ch * d.len);
    let w = values(&mut rng, d.out_ch * d.in_ch * d.kernel);
    let bias = values(&mut rng, d.out_ch);
    both(c, "conv1d_b32_c256_k5", || {
        black_box(conv1d_forward(&x, &w, &bias, d));
    });
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ModelConfig { d_model: 64, hidden: 256, ..Default::default() };
    let model = Model::new(cfg.clone(), 3).unwrap();
    let train = batch(&cfg, 32, &mut rng);
    both(c, "train_step_b32_d64", || {
        let mut tape = Tape::new(&model.params);
        let out = model.net.forward(&mut tape, &train, Mode::Train, None).unwrap();
        let loss = tape.huber_loss(out.prediction, &train.targets, 1e-3).unwrap();
        black_box(tape.backward(loss).unwrap());
    });

    let mut full = Model::new(ModelConfig::default(), 4).unwrap();
    full.freeze_initial_stats();
    let eval = batch(full.config(), 16, &mut rng);
    both(c, "graph_predict_b16_default", || {
        black_box(full.predict(&eval).unwrap());
    });
    let predictor = full.predictor().unwrap();
    both(c, "packed_predict_b16_default", || {
        black_box(predictor.predict(&eval).unwrap());
    });
}

criterion_group!(benches, kernels, model);
criterion_main!(benches);
