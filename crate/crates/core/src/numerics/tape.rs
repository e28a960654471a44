//! Reverse-mode differentiation over a recorded forward computation.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, records every operation as
//! a node holding its output value plus whatever the backward rule needs, and
//! [`Tape::backward`] walks the nodes in reverse to produce [`Gradients`].
//! Parameter values are never copied onto the tape.

use rand::{Rng, RngCore};

use super::kernels::{self, ConvDims};
use super::par;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How a batch-norm node obtains its normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Use the moments of the current batch (gradients flow through them).
    Batch { eps: f64 },
    /// Use frozen running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Batch moments observed by a train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Per-sample, per-variable statistics captured by [`Tape::revin_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats {
    pub batch: usize,
    pub vars: usize,
    /// `batch×vars` temporal means.
    pub mean: Vec<f64>,
    /// `batch×vars` values of `√(var+ε)`.
    pub std: Vec<f64>,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Transpose12 {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    Slice1 {
        x: Var,
        start: usize,
    },
    Concat1 {
        parts: Vec<Var>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    BroadcastBatch {
        x: Var,
    },
    RevinNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xn: Vec<f64>,
        std: Vec<f64>,
    },
    RevinDenorm {
        y: Var,
        gamma: Var,
        beta: Var,
        std: Vec<f64>,
    },
    Huber {
        pred: Var,
        target: Vec<f64>,
        delta: f64,
        norm: f64,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&data, name)?;
        let needs_grad = parents.iter().any(|p| self.needs(*p));
        self.nodes.push(Node {
            value: Value::Owned(Tensor::from_parts(shape, data)),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Affine map along the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (inp, out) = match ws[..] {
            [i, o] => (i, o),
            _ => return Err(Error::shape("linear", format!("weight must be 2-D, got {ws:?}"))),
        };
        if xs.last() != Some(&inp) {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear", format!("bias {:?} vs out {out}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut y = vec![0.0; rows * out];
        kernels::gemm(rows, inp, out, self.value(x).data(), false, self.value(w).data(), false, &mut y, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            y.chunks_mut(out).for_each(|r| add_into(r, bias));
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = out;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(shape, y, Op::Linear { x, w, b, rows }, &parents, "linear")
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(Error::shape("matmul", "operands must be 2-D"));
        }
        self.linear(a, b, None)
    }

    /// Batched product of `s×p×q` with `s×q×r` (or `s×r×q` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (s, p, q) = dims3(self.value(a), "bmm")?;
        let (sb, b1, b2) = dims3(self.value(b), "bmm")?;
        let (qb, r) = if trans_b { (b2, b1) } else { (b1, b2) };
        if sb != s || qb != q {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0; s * p * r];
        par::for_each_chunk(&mut y, p * r, |i, out| {
            kernels::gemm(p, q, r, &ad[i * p * q..][..p * q], false, &bd[i * q * r..][..q * r], trans_b, out, false);
        });
        self.push(vec![s, p, r], y, Op::Bmm { a, b, trans_b }, &[a, b], "bmm")
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s (broadcast over
    /// leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let shape = sa.to_vec();
        let bd = self.value(b).data();
        let mut y = self.value(a).data().to_vec();
        y.chunks_mut(bd.len()).for_each(|c| add_into(c, bd));
        self.push(shape, y, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let y = t.data().iter().map(|v| v * factor).collect();
        self.push(t.shape().to_vec(), y, Op::Scale { x, factor }, &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut y = vec![0.0; t.len()];
        par::map_into(t.data(), &mut y, |v| v.max(0.0));
        self.push(t.shape().to_vec(), y, Op::Relu { x }, &[x], "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut y = vec![0.0; t.len()];
        par::map_into(t.data(), &mut y, f64::tanh);
        self.push(t.shape().to_vec(), y, Op::Tanh { x }, &[x], "tanh")
    }

    /// Inverted dropout. `rng = None` is evaluation mode (identity).
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let y = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push(shape, y, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (s, r, c) = dims3(self.value(x), "transpose12")?;
        let y = kernels::transpose12(self.value(x).data(), s, r, c);
        self.push(vec![s, c, r], y, Op::Transpose12 { x }, &[x], "transpose12")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().expect("rank >= 1");
        let y = kernels::softmax_rows(t.data(), cols);
        let shape = t.shape().to_vec();
        self.push(shape, y, Op::Softmax { x }, &[x], "softmax")
    }

    /// Batch normalization of `batch×channels×len` over the batch and length
    /// axes, per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (s, ch, len) = dims3(self.value(x), "batch_norm")?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape("batch_norm", format!("affine params must have {ch} channels")));
        }
        let (mean, var, eps, moments) = match stats {
            NormStats::Batch { eps } => {
                if s * len < 2 {
                    return Err(Error::invalid("batch_norm", "train mode needs at least 2 values per channel"));
                }
                let (mean, var) = kernels::channel_moments(self.value(x).data(), s, ch, len);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: s * len,
                };
                (mean, var, eps, Some(moments))
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape("batch_norm", "running statistics channel count"));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = kernels::channel_affine_normalize(
            self.value(x).data(),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            ch,
            len,
        );
        let batch_stats = moments.is_some();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        let v = self.push(vec![s, ch, len], y, op, &[x, gamma, beta], "batch_norm")?;
        Ok((v, moments))
    }

    /// Same-padded stride-1 convolution of `batch×in×len` with `out×in×k`
    /// kernels (k odd) and per-output-channel bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (s, cin, len) = dims3(self.value(x), "conv1d")?;
        let (cout, win, k) = dims3(self.value(w), "conv1d")?;
        if k % 2 == 0 {
            return Err(Error::invalid("conv1d", format!("kernel size {k} is even")));
        }
        if win != cin {
            return Err(Error::shape("conv1d", format!("input has {cin} channels, kernels expect {win}")));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv1d", format!("bias {:?} vs {cout} outputs", self.shape(b))));
        }
        let dims = ConvDims {
            batch: s,
            in_ch: cin,
            out_ch: cout,
            len,
            kernel: k,
        };
        let y = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), dims);
        self.push(vec![s, cout, len], y, Op::Conv1d { x, w, b, dims }, &[x, w, b], "conv1d")
    }

    /// Rows `start..start+len` of axis 1.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] || len == 0 {
            return Err(Error::shape("slice1", format!("{start}..{} of {shape:?}", start + len)));
        }
        let inner: usize = shape[2..].iter().product();
        let data = self.value(x).data();
        let mut y = Vec::with_capacity(shape[0] * len * inner);
        for b in 0..shape[0] {
            let base = (b * shape[1] + start) * inner;
            y.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        self.push(out_shape, y, Op::Slice1 { x, start }, &[x], "slice1")
    }

    /// Concatenation along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat1", "no inputs"))?).to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat1", "rank must be >= 2"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat1", format!("{s:?} vs {first:?}")));
            }
            total += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let mut y = Vec::with_capacity(first[0] * total * inner);
        for b in 0..first[0] {
            for p in parts {
                let t = self.value(*p);
                let rows = t.shape()[1] * inner;
                y.extend_from_slice(&t.data()[b * rows..(b + 1) * rows]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        self.push(shape, y, Op::Concat1 { parts: parts.to_vec() }, parts, "concat1")
    }

    /// `s×L×(h·d)` → `(s·h)×L×d`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (s, l, w) = dims3(self.value(x), "split_heads")?;
        if heads == 0 || w % heads != 0 {
            return Err(Error::shape("split_heads", format!("width {w} not divisible by {heads}")));
        }
        let y = permute_heads(self.value(x).data(), s, l, heads, w / heads, true);
        self.push(vec![s * heads, l, w / heads], y, Op::SplitHeads { x, heads }, &[x], "split_heads")
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (sh, l, d) = dims3(self.value(x), "merge_heads")?;
        if heads == 0 || sh % heads != 0 {
            return Err(Error::shape("merge_heads", format!("batch {sh} not divisible by {heads}")));
        }
        let s = sh / heads;
        let y = permute_heads(self.value(x).data(), s, l, heads, d, false);
        self.push(vec![s, l, heads * d], y, Op::MergeHeads { x, heads }, &[x], "merge_heads")
    }

    /// Repeats a tensor along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let t = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(t.shape());
        let y = t.data().repeat(batch);
        self.push(shape, y, Op::BroadcastBatch { x }, &[x], "broadcast_batch")
    }

    /// Reversible instance normalization of `batch×steps×vars` along the
    /// steps axis. The captured mean and scale are treated as constants.
    pub fn revin_normalize(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, RevinStats)> {
        let (s, m, c) = dims3(self.value(x), "revin_normalize")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("revin_normalize", "affine params must match variable count"));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; s * c];
        let mut std = vec![0.0; s * c];
        for b in 0..s {
            for v in 0..c {
                let mu = (0..m).map(|t| xd[(b * m + t) * c + v]).sum::<f64>() / m as f64;
                let var = (0..m).map(|t| (xd[(b * m + t) * c + v] - mu).powi(2)).sum::<f64>() / m as f64;
                mean[b * c + v] = mu;
                std[b * c + v] = (var + eps).sqrt();
            }
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xn = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for (i, (xv, (n, o))) in xd.iter().zip(xn.iter_mut().zip(y.iter_mut())).enumerate() {
            let (b, v) = (i / (m * c), i % c);
            *n = (xv - mean[b * c + v]) / std[b * c + v];
            *o = g[v] * *n + be[v];
        }
        let stats = RevinStats {
            batch: s,
            vars: c,
            mean,
            std: std.clone(),
        };
        let op = Op::RevinNorm {
            x,
            gamma,
            beta,
            xn,
            std,
        };
        let v = self.push(vec![s, m, c], y, op, &[x, gamma, beta], "revin_normalize")?;
        Ok((v, stats))
    }

    /// `ŷ = std·(ỹ − β)/γ + mean`, the inverse of [`Tape::revin_normalize`].
    pub fn revin_denormalize(&mut self, y: Var, gamma: Var, beta: Var, stats: &RevinStats) -> Result<Var> {
        let (s, n, c) = dims3(self.value(y), "revin_denormalize")?;
        if s != stats.batch || c != stats.vars {
            return Err(Error::shape("revin_denormalize", "statistics do not match the batch"));
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        if g.contains(&0.0) {
            return Err(Error::invalid("revin_denormalize", "affine scale gamma is zero"));
        }
        let yd = self.value(y).data();
        let out = yd
            .iter()
            .enumerate()
            .map(|(i, yv)| {
                let (b, v) = (i / (n * c), i % c);
                stats.std[b * c + v] * (yv - be[v]) / g[v] + stats.mean[b * c + v]
            })
            .collect();
        let op = Op::RevinDenorm {
            y,
            gamma,
            beta,
            std: stats.std.clone(),
        };
        self.push(vec![s, n, c], out, op, &[y, gamma, beta], "revin_denormalize")
    }

    /// Huber loss summed over the last axis and averaged over the others.
    pub fn huber_loss(&mut self, pred: Var, target: &Tensor, delta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("huber_loss", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        if delta <= 0.0 {
            return Err(Error::invalid("huber_loss", "delta must be positive"));
        }
        let vars = *p.shape().last().expect("rank >= 1");
        let norm = (p.len() / vars) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| crate::training::huber(b - a, delta))
            .sum();
        let op = Op::Huber {
            pred,
            target: target.data().to_vec(),
            delta,
            norm,
        };
        self.push(vec![1], vec![total / norm], op, &[pred], "huber_loss")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(vec![1], vec![total], Op::Sum { x }, &[x], "sum")
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// appears on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut by_param: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut emit = |v: Var, g: Vec<f64>| {
                if self.needs(v) {
                    match &mut grads[v.0] {
                        Some(acc) => add_into(acc, &g),
                        slot => *slot = Some(g),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut by_param[id.0] {
                    Some(acc) => add_into(acc, &dy),
                    slot => *slot = Some(dy),
                },
                Op::Linear { x, w, b, rows } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (inp, out) = (wt.shape()[0], wt.shape()[1]);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * inp];
                        kernels::gemm(*rows, out, inp, &dy, false, wt.data(), true, &mut dx, false);
                        emit(*x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; inp * out];
                        kernels::gemm(inp, *rows, out, xt.data(), true, &dy, false, &mut dw, false);
                        emit(*w, dw);
                    }
                    if let Some(b) = b {
                        let mut db = vec![0.0; out];
                        dy.chunks(out).for_each(|r| add_into(&mut db, r));
                        emit(*b, db);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (s, p, q) = dims3(self.value(*a), "bmm")?;
                    let r = self.value(Var(i)).shape()[2];
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let mut da = vec![0.0; s * p * q];
                        par::for_each_chunk(&mut da, p * q, |k, out| {
                            let dyk = &dy[k * p * r..][..p * r];
                            let bk = &bd[k * q * r..][..q * r];
                            kernels::gemm(p, r, q, dyk, false, bk, !trans_b, out, false);
                        });
                        emit(*a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; s * q * r];
                        par::for_each_chunk(&mut db, q * r, |k, out| {
                            let dyk = &dy[k * p * r..][..p * r];
                            let ak = &ad[k * p * q..][..p * q];
                            if *trans_b {
                                kernels::gemm(r, p, q, dyk, true, ak, false, out, false);
                            } else {
                                kernels::gemm(q, p, r, ak, true, dyk, false, out, false);
                            }
                        });
                        emit(*b, db);
                    }
                }
                Op::Add { a, b } => {
                    let blen = self.value(*b).len();
                    if self.needs(*b) {
                        let mut db = vec![0.0; blen];
                        dy.chunks(blen).for_each(|c| add_into(&mut db, c));
                        emit(*b, db);
                    }
                    emit(*a, dy);
                }
                Op::Scale { x, factor } => emit(*x, dy.iter().map(|g| g * factor).collect()),
                Op::Relu { x } => {
                    let xd = self.value(*x).data();
                    emit(*x, dy.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Tanh { x } => {
                    let yd = self.value(Var(i)).data();
                    emit(*x, dy.iter().zip(yd).map(|(g, t)| g * (1.0 - t * t)).collect());
                }
                Op::Dropout { x, mask } => emit(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()),
                Op::Transpose12 { x } => {
                    let (s, r, c) = dims3(self.value(*x), "transpose12")?;
                    emit(*x, kernels::transpose12(&dy, s, c, r));
                }
                Op::Softmax { x } => {
                    let p = self.value(Var(i));
                    let cols = *p.shape().last().expect("rank >= 1");
                    emit(*x, kernels::softmax_rows_backward(p.data(), &dy, cols));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (s, ch, len) = dims3(self.value(*x), "batch_norm")?;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; ch];
                    let mut dbeta = vec![0.0; ch];
                    for (row, (dyr, xr)) in dy.chunks(len).zip(xhat.chunks(len)).enumerate() {
                        let c = row % ch;
                        dbeta[c] += dyr.iter().sum::<f64>();
                        dgamma[c] += dyr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if self.needs(*x) {
                        let count = (s * len) as f64;
                        let mut dx = vec![0.0; dy.len()];
                        par::for_each_chunk(&mut dx, len, |row, out| {
                            let c = row % ch;
                            let dyr = &dy[row * len..][..len];
                            let xr = &xhat[row * len..][..len];
                            if *batch_stats {
                                // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                                let k = g[c] * inv_std[c] / count;
                                for ((o, d), xh) in out.iter_mut().zip(dyr).zip(xr) {
                                    *o = k * (count * d - dbeta[c] - xh * dgamma[c]);
                                }
                            } else {
                                for (o, d) in out.iter_mut().zip(dyr) {
                                    *o = g[c] * inv_std[c] * d;
                                }
                            }
                        });
                        emit(*x, dx);
                    }
                    emit(*gamma, dgamma);
                    emit(*beta, dbeta);
                }
                Op::Conv1d { x, w, b, dims } => {
                    let (dx, dw, db) = kernels::conv1d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &dy,
                        *dims,
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        emit(*x, dx);
                    }
                    emit(*w, dw);
                    emit(*b, db);
                }
                Op::Slice1 { x, start } => {
                    let shape = self.shape(*x);
                    let inner: usize = shape[2..].iter().product();
                    let len = self.shape(Var(i))[1];
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for b in 0..shape[0] {
                        let base = (b * shape[1] + start) * inner;
                        dx[base..base + len * inner].copy_from_slice(&dy[b * len * inner..][..len * inner]);
                    }
                    emit(*x, dx);
                }
                Op::Concat1 { parts } => {
                    let out_shape = self.shape(Var(i));
                    let inner: usize = out_shape[2..].iter().product();
                    let total = out_shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.shape(*p)[1];
                        if self.needs(*p) {
                            let mut dp = Vec::with_capacity(self.value(*p).len());
                            for b in 0..out_shape[0] {
                                let base = (b * total + offset) * inner;
                                dp.extend_from_slice(&dy[base..base + rows * inner]);
                            }
                            emit(*p, dp);
                        }
                        offset += rows;
                    }
                }
                Op::SplitHeads { x, heads } => {
                    let (s, l, w) = dims3(self.value(*x), "split_heads")?;
                    emit(*x, permute_heads(&dy, s, l, *heads, w / heads, false));
                }
                Op::MergeHeads { x, heads } => {
                    let (sh, l, d) = dims3(self.value(*x), "merge_heads")?;
                    emit(*x, permute_heads(&dy, sh / heads, l, *heads, d, true));
                }
                Op::BroadcastBatch { x } => {
                    let n = self.value(*x).len();
                    let mut dx = vec![0.0; n];
                    dy.chunks(n).for_each(|c| add_into(&mut dx, c));
                    emit(*x, dx);
                }
                Op::RevinNorm {
                    x,
                    gamma,
                    beta,
                    xn,
                    std,
                } => {
                    let (_, m, c) = dims3(self.value(*x), "revin_normalize")?;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (k, (d, n)) in dy.iter().zip(xn).enumerate() {
                        dgamma[k % c] += d * n;
                        dbeta[k % c] += d;
                    }
                    if self.needs(*x) {
                        let dx = dy
                            .iter()
                            .enumerate()
                            .map(|(k, d)| d * g[k % c] / std[(k / (m * c)) * c + k % c])
                            .collect();
                        emit(*x, dx);
                    }
                    emit(*gamma, dgamma);
                    emit(*beta, dbeta);
                }
                Op::RevinDenorm { y, gamma, beta, std } => {
                    let (_, n, c) = dims3(self.value(*y), "revin_denormalize")?;
                    let (g, be) = (self.value(*gamma).data(), self.value(*beta).data());
                    let yd = self.value(*y).data();
                    let mut dy_in = vec![0.0; dy.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (k, d) in dy.iter().enumerate() {
                        let v = k % c;
                        let sd = std[(k / (n * c)) * c + v];
                        dy_in[k] = d * sd / g[v];
                        dbeta[v] -= d * sd / g[v];
                        dgamma[v] -= d * sd * (yd[k] - be[v]) / (g[v] * g[v]);
                    }
                    emit(*y, dy_in);
                    emit(*gamma, dgamma);
                    emit(*beta, dbeta);
                }
                Op::Huber {
                    pred,
                    target,
                    delta,
                    norm,
                } => {
                    let pd = self.value(*pred).data();
                    let scale = dy[0] / norm;
                    let dp = pd
                        .iter()
                        .zip(target)
                        .map(|(p, t)| {
                            let r = t - p;
                            -scale * if r.abs() <= *delta { r } else { delta * r.signum() }
                        })
                        .collect();
                    emit(*pred, dp);
                }
                Op::Sum { x } => emit(*x, vec![dy[0]; self.value(*x).len()]),
            }
        }
        Ok(Gradients { by_param })
    }
}

/// Moves head `e`'s columns `e·d..(e+1)·d` of a `s×L×(h·d)` array into batch
/// row `b·h+e` (`split = true`), or back (`split = false`).
fn permute_heads(x: &[f64], s: usize, l: usize, h: usize, d: usize, split: bool) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for b in 0..s {
        for e in 0..h {
            for t in 0..l {
                let merged = (b * l + t) * h * d + e * d;
                let split_at = ((b * h + e) * l + t) * d;
                if split {
                    y[split_at..split_at + d].copy_from_slice(&x[merged..merged + d]);
                } else {
                    y[merged..merged + d].copy_from_slice(&x[split_at..split_at + d]);
                }
            }
        }
    }
    y
}
