#![allow(dead_code)]

use mmctp_core::ingest::TIME_FEATURES;
use mmctp_core::model::{Batch, ModelConfig, Variant};
use mmctp_core::numerics::{grad_check, BatchMoments, GradCheckReport, NormStats, ParamStore, Tape, Tensor, Var, DEFAULT_STEP};
use mmctp_core::training::huber;
use mmctp_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Values at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn tiny() -> ModelConfig {
    ModelConfig {
        m: 8,
        n: 2,
        prior: 4,
        d_model: 8,
        hidden: 16,
        heads: 2,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn random_batch(c: &ModelConfig, s: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    Batch {
        inputs: uniform(&mut r, &[s, c.m, c.vars], 2.0),
        input_time: uniform(&mut r, &[s, c.m, TIME_FEATURES], 0.5),
        future_time: uniform(&mut r, &[s, c.n, TIME_FEATURES], 0.5),
        targets: uniform(&mut r, &[s, c.n, c.vars], 2.0),
    }
}

/// Registers `inputs` as parameters, builds `op` on them and checks a
/// quadratic loss against a fixed random target. `only` restricts the check
/// to some of the inputs.
pub fn check_op(inputs: Vec<Tensor>, only: Option<&[usize]>, op: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>) -> GradCheckReport {
    let mut params = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().enumerate().map(|(i, t)| params.push(format!("in{i}"), t)).collect();
    let subset: Option<Vec<_>> = only.map(|o| o.iter().map(|&i| ids[i]).collect());
    let mut target = None;
    grad_check(&mut params, subset.as_deref(), DEFAULT_STEP, |tape| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = op(tape, &vars)?;
        if tape.value(out).len() == 1 {
            return Ok(out);
        }
        let shape = tape.shape(out).to_vec();
        let t = target.get_or_insert_with(|| uniform(&mut rng(99), &shape, 1.0));
        // A huge threshold keeps the loss on its smooth quadratic branch.
        tape.huber_loss(out, t, 1e3)
    })
    .unwrap()
}

/// One gradient check per differentiable operation.
pub fn op_cases() -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(2024);
    let mut cases = Vec::new();
    let mut add = |name, report| cases.push((name, report));

    add("linear", check_op(vec![uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[4, 5], 1.0), uniform(&mut r, &[5], 1.0)], None, |t, v| t.linear(v[0], v[1], Some(v[2]))));
    add("matmul", check_op(vec![uniform(&mut r, &[3, 4], 1.0), uniform(&mut r, &[4, 2], 1.0)], None, |t, v| t.matmul(v[0], v[1])));
    add("bmm", check_op(vec![uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[2, 4, 5], 1.0)], None, |t, v| t.bmm(v[0], v[1], false)));
    add("bmm_transposed", check_op(vec![uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[2, 5, 4], 1.0)], None, |t, v| t.bmm(v[0], v[1], true)));
    add("add_broadcast", check_op(vec![uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[3, 4], 1.0)], None, |t, v| t.add(v[0], v[1])));
    add("scale", check_op(vec![uniform(&mut r, &[2, 5], 1.0)], None, |t, v| t.scale(v[0], -1.7)));
    add("relu", check_op(vec![away_from_zero(&mut r, &[3, 6], 0.05)], None, |t, v| t.relu(v[0])));
    add("tanh", check_op(vec![uniform(&mut r, &[3, 6], 2.0)], None, |t, v| t.tanh(v[0])));
    add(
        "dropout",
        check_op(vec![uniform(&mut r, &[4, 6], 1.0)], None, |t, v| {
            let mut mask_rng = rng(3);
            t.dropout(v[0], 0.3, Some(&mut mask_rng))
        }),
    );
    add("transpose12", check_op(vec![uniform(&mut r, &[2, 3, 4], 1.0)], None, |t, v| t.transpose12(v[0])));
    add("softmax", check_op(vec![uniform(&mut r, &[3, 5], 2.0)], None, |t, v| t.softmax(v[0])));
    add(
        "batch_norm_batch_stats",
        check_op(vec![uniform(&mut r, &[3, 2, 4], 1.0), uniform(&mut r, &[2], 1.0), uniform(&mut r, &[2], 1.0)], None, |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?.0)
        }),
    );
    add(
        "batch_norm_running_stats",
        check_op(vec![uniform(&mut r, &[3, 2, 4], 1.0), uniform(&mut r, &[2], 1.0), uniform(&mut r, &[2], 1.0)], None, |t, v| {
            let stats = NormStats::Running { mean: &[0.2, -0.1], var: &[0.8, 1.3], eps: 1e-5 };
            Ok(t.batch_norm(v[0], v[1], v[2], stats)?.0)
        }),
    );
    add("conv1d", check_op(vec![uniform(&mut r, &[2, 3, 7], 1.0), uniform(&mut r, &[4, 3, 5], 1.0), uniform(&mut r, &[4], 1.0)], None, |t, v| t.conv1d(v[0], v[1], v[2])));
    add("slice1", check_op(vec![uniform(&mut r, &[2, 6, 3], 1.0)], None, |t, v| t.slice1(v[0], 2, 3)));
    add("concat1", check_op(vec![uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[2, 2, 4], 1.0)], None, |t, v| t.concat1(&[v[0], v[1]])));
    add("split_heads", check_op(vec![uniform(&mut r, &[2, 3, 6], 1.0)], None, |t, v| t.split_heads(v[0], 3)));
    add("merge_heads", check_op(vec![uniform(&mut r, &[6, 3, 2], 1.0)], None, |t, v| t.merge_heads(v[0], 3)));
    add("broadcast_batch", check_op(vec![uniform(&mut r, &[3, 4], 1.0)], None, |t, v| t.broadcast_batch(v[0], 3)));
    // The instance statistics are constants of the transform, so only the
    // affine parameters have exact derivatives.
    add(
        "revin_normalize",
        check_op(vec![uniform(&mut r, &[2, 6, 3], 2.0), away_from_zero(&mut r, &[3], 0.3), uniform(&mut r, &[3], 1.0)], Some(&[1, 2]), |t, v| {
            Ok(t.revin_normalize(v[0], v[1], v[2], 1e-5)?.0)
        }),
    );
    let stats_source = uniform(&mut r, &[2, 6, 3], 2.0);
    add(
        "revin_denormalize",
        check_op(vec![uniform(&mut r, &[2, 4, 3], 1.0), away_from_zero(&mut r, &[3], 0.3), uniform(&mut r, &[3], 1.0)], None, move |t, v| {
            let x = t.constant(stats_source.clone());
            let (_, stats) = t.revin_normalize(x, v[1], v[2], 1e-5)?;
            t.revin_denormalize(v[0], v[1], v[2], &stats)
        }),
    );
    // Residuals straddle the threshold so both branches are exercised.
    let target = uniform(&mut r, &[3, 2, 3], 1.0);
    add(
        "huber_loss",
        check_op(vec![uniform(&mut r, &[3, 2, 3], 1.0)], None, move |t, v| t.huber_loss(v[0], &target, 0.4)),
    );
    add("sum", check_op(vec![uniform(&mut r, &[3, 4], 1.0)], None, |t, v| t.sum(v[0])));
    cases
}

/// Gradient check of the whole tiny model on a two-sample batch.
pub fn model_grad_check(variant: Variant, step: f64) -> GradCheckReport {
    let c = ModelConfig { variant, ..tiny() };
    let mut model = mmctp_core::model::Model::new(c.clone(), 11).unwrap();
    let batch = random_batch(&c, 2, 12);
    let net = &model.net;
    grad_check(&mut model.params, None, step, |tape| {
        let out = net.forward(tape, &batch, mmctp_core::numerics::Mode::Train, None)?;
        tape.huber_loss(out.prediction, &batch.targets, 0.001)
    })
    .unwrap()
}

// Brute-force loop oracles.

/// `y[b,o,l] = bias[o] + Σ_i Σ_t w[o,i,t]·x[b,i,l+t−pad]` with zero padding.
pub fn conv1d_oracle(x: &Tensor, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (s, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) as i64 / 2;
    let mut y = Vec::with_capacity(s * cout * len);
    for b in 0..s {
        for o in 0..cout {
            for l in 0..len {
                let mut acc = bias.data()[o];
                for i in 0..cin {
                    for t in 0..k {
                        let p = l as i64 + t as i64 - pad;
                        if p >= 0 && (p as usize) < len {
                            acc += w.data()[(o * cin + i) * k + t] * x.data()[(b * cin + i) * len + p as usize];
                        }
                    }
                }
                y.push(acc);
            }
        }
    }
    y
}

/// Batch normalization with statistics over batch and length; returns the
/// output and the per-channel moments.
pub fn batch_norm_oracle(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, BatchMoments) {
    let (s, ch, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let at = |b: usize, c: usize, l: usize| x.data()[(b * ch + c) * len + l];
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut sum = 0.0;
        for b in 0..s {
            for l in 0..len {
                sum += at(b, c, l);
            }
        }
        mean[c] = sum / (s * len) as f64;
        let mut sq = 0.0;
        for b in 0..s {
            for l in 0..len {
                sq += (at(b, c, l) - mean[c]).powi(2);
            }
        }
        var[c] = sq / (s * len) as f64;
    }
    let mut y = vec![0.0; x.len()];
    for b in 0..s {
        for c in 0..ch {
            for l in 0..len {
                y[(b * ch + c) * len + l] = gamma[c] * (at(b, c, l) - mean[c]) / (var[c] + eps).sqrt() + beta[c];
            }
        }
    }
    (y, BatchMoments { mean, var, count: s * len })
}

pub fn softmax_oracle(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut total = 0.0;
        for &v in row {
            total += (v - max).exp();
        }
        for &v in row {
            out.push((v - max).exp() / total);
        }
    }
    out
}

/// `(1/(s·n)) Σ_b Σ_t Σ_v huber(target − pred)`.
pub fn batch_loss_oracle(pred: &Tensor, target: &Tensor, delta: f64) -> f64 {
    let (s, n, c) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut total = 0.0;
    for b in 0..s {
        for t in 0..n {
            for v in 0..c {
                let i = (b * n + t) * c + v;
                total += huber(target.data()[i] - pred.data()[i], delta);
            }
        }
    }
    total / (s * n) as f64
}

pub fn mse_oracle(pred: &Tensor, truth: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += (pred.data()[i] - truth.data()[i]).powi(2);
    }
    total / pred.len() as f64
}

pub fn mae_oracle(pred: &Tensor, truth: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += (pred.data()[i] - truth.data()[i]).abs();
    }
    total / pred.len() as f64
}
