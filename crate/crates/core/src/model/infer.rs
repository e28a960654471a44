//! Evaluation-only forward pass without a graph. Weight matrices are packed
//! once per predictor and each sample flows through time-major buffers.

use super::network::{local_time, Attention, ConvBlock, Embedding, Fusion, Linear, MlpBlock, Norm, QuerySource, BN_EPS, GLOBAL_ACTIVATION, LOCAL_ACTIVATION, REVIN_EPS};
use super::{Batch, Model};
use crate::error::{Error, Result};
use crate::ingest::TIME_FEATURES;
use crate::numerics::kernels::{softmax_rows, transpose12};
use crate::numerics::{gemm_packed, PackedMatrix, ParamId, Tensor};

/// Batch-1 friendly evaluator for a fixed model. Produces the same
/// predictions as [`Model::predict`] up to rounding.
pub struct Predictor<'m> {
    model: &'m Model,
    packed: Vec<Option<PackedMatrix>>,
    /// Running mean and `1/√(var+ε)` per normalization slot.
    norms: Vec<(Vec<f64>, Vec<f64>)>,
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    transpose12(x, 1, rows, cols)
}

fn add_in(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let net = &model.net;
        if net.running.iter().any(|r| !r.initialized) {
            return Err(Error::UninitializedStats);
        }
        let params = &model.params;
        let mut packed = vec![None; params.len()];
        let mut linear = |l: &Linear| {
            let w = params.get(l.w);
            packed[l.w.index()] = Some(PackedMatrix::from_row_major(w.data(), w.shape()[0], w.shape()[1]));
        };
        let layout = &net.layout;
        if let Some(g) = &layout.global {
            embedding_linears(&g.embed).iter().for_each(|l| linear(l));
            for b in &g.blocks {
                linear(&b.fc1);
                linear(&b.fc2);
            }
            linear(&g.bridge);
        }
        let mut convs = Vec::new();
        if let QuerySource::Local { embed, blocks } = &layout.query {
            embedding_linears(embed).iter().for_each(|l| linear(l));
            for b in blocks {
                convs.extend(b.convs.iter().chain([&b.merge]).map(|c| c.w));
            }
        }
        match &layout.fusion {
            Fusion::Attention(a) => attention_linears(a).iter().for_each(|l| linear(l)),
            Fusion::Swapped { attn, resize } => {
                attention_linears(attn).iter().for_each(|l| linear(l));
                linear(resize);
            }
            Fusion::Concat { head } => linear(head),
        }
        linear(&layout.output);
        for id in convs {
            let w = params.get(id);
            let (out, inp, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            // Row `t·in + i` holds tap t of input channel i.
            let wd = w.data();
            packed[id.index()] = Some(PackedMatrix::from_fn(k * inp, out, |p, o| wd[(o * inp + p % inp) * k + p / inp]));
        }
        let norms = net
            .running
            .iter()
            .map(|r| (r.mean.clone(), r.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()))
            .collect();
        Ok(Self { model, packed, norms })
    }

    /// Evaluation-mode prediction, `s×n×C`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let c = self.model.config();
        let s = self.model.net.check_batch(batch)?;
        let (m, n, vars, len) = (c.m, c.n, c.vars, c.local_len());
        let times = local_time(batch, c.prior);
        let mut out = vec![0.0; s * n * vars];
        for b in 0..s {
            self.sample(
                &batch.inputs.data()[b * m * vars..][..m * vars],
                &batch.input_time.data()[b * m * TIME_FEATURES..][..m * TIME_FEATURES],
                &times.data()[b * len * TIME_FEATURES..][..len * TIME_FEATURES],
                &mut out[b * n * vars..][..n * vars],
            )?;
        }
        Ok(Tensor::from_parts(vec![s, n, vars], out))
    }

    fn param(&self, id: ParamId) -> &[f64] {
        self.model.params.get(id).data()
    }

    /// `x·W + b` for `rows` rows of `x`.
    fn dense(&self, w: ParamId, b: ParamId, x: &[f64], rows: usize) -> Vec<f64> {
        let packed = self.packed[w.index()].as_ref().expect("weight packed at construction");
        let cols = packed.cols();
        let mut y = vec![0.0; rows * cols];
        gemm_packed(rows, x, packed, &mut y, cols);
        let bias = self.param(b);
        y.chunks_mut(cols).for_each(|r| add_in(r, bias));
        y
    }

    fn linear(&self, l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
        self.dense(l.w, l.b, x, rows)
    }

    fn embed(&self, e: &Embedding, values: &[f64], time: &[f64], pos: &[f64], rows: usize) -> Vec<f64> {
        let mut v = self.linear(&e.value, values, rows);
        add_in(&mut v, pos);
        let t = self.linear(&e.temporal, time, rows);
        add_in(&mut v, &t);
        self.linear(&e.post, &v, rows)
    }

    /// Normalizes the columns of a time-major `rows×ch` block.
    fn normalize(&self, norm: &Norm, x: &[f64], ch: usize) -> Vec<f64> {
        let (mean, inv) = &self.norms[norm.slot];
        let (g, b) = (self.param(norm.gamma), self.param(norm.beta));
        let mut y = x.to_vec();
        for row in y.chunks_mut(ch) {
            for (c, v) in row.iter_mut().enumerate() {
                let xhat = (*v - mean[c]) * inv[c];
                *v = g[c] * xhat + b[c];
            }
        }
        y
    }

    fn mlp_block(&self, blk: &MlpBlock, h: &mut [f64], m: usize, vars: usize) {
        let normed = transpose(&self.normalize(&blk.norm, h, vars), m, vars);
        let mut z = self.linear(&blk.fc1, &normed, vars);
        z.iter_mut().for_each(|v| *v = GLOBAL_ACTIVATION.scalar(*v));
        let z = self.linear(&blk.fc2, &z, vars);
        add_in(h, &transpose(&z, vars, m));
    }

    /// Runs one conv block on `rows_in` rows and returns the rows from
    /// `skip` on.
    fn conv_block(&self, blk: &ConvBlock, h: &[f64], rows_in: usize, skip: usize, d: usize) -> Vec<f64> {
        let normed = self.normalize(&blk.norm, h, d);
        let rows = rows_in - skip;
        let width = blk.convs.len() * d;
        let mut cat = vec![0.0; rows * width];
        let mut unfolded = Vec::new();
        for (ci, conv) in blk.convs.iter().enumerate() {
            let k = self.model.params.get(conv.w).shape()[2];
            let pad = (k - 1) / 2;
            unfolded.clear();
            unfolded.resize(rows * k * d, 0.0);
            for o in 0..rows {
                for t in 0..k {
                    let src = (skip + o + t).wrapping_sub(pad);
                    if src < rows_in {
                        unfolded[(o * k + t) * d..][..d].copy_from_slice(&normed[src * d..][..d]);
                    }
                }
            }
            let packed = self.packed[conv.w.index()].as_ref().expect("weight packed at construction");
            gemm_packed(rows, &unfolded, packed, &mut cat[ci * d..], width);
            let bias = self.param(conv.b);
            for row in cat.chunks_mut(width) {
                for (v, b) in row[ci * d..][..d].iter_mut().zip(bias) {
                    *v = LOCAL_ACTIVATION.scalar(*v + b);
                }
            }
        }
        let mut y = self.dense(blk.merge.w, blk.merge.b, &cat, rows);
        add_in(&mut y, &h[skip * d..]);
        y
    }

    fn attend(&self, a: &Attention, query: &[f64], nq: usize, source: &[f64], ns: usize) -> Vec<f64> {
        let c = self.model.config();
        let (d, heads, dh) = (c.d_model, c.heads, c.head_dim());
        let q = self.linear(&a.head_q, &self.linear(&a.q, query, nq), nq);
        let k = self.linear(&a.head_k, &self.linear(&a.k, source, ns), ns);
        let v = self.linear(&a.head_v, &self.linear(&a.v, source, ns), ns);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0; nq * d];
        let mut scores = vec![0.0; nq * ns];
        for e in 0..heads {
            let off = e * dh;
            for i in 0..nq {
                for j in 0..ns {
                    let dot: f64 = q[i * d + off..][..dh].iter().zip(&k[j * d + off..][..dh]).map(|(x, y)| x * y).sum();
                    scores[i * ns + j] = dot * scale;
                }
            }
            let p = softmax_rows(&scores, ns);
            for i in 0..nq {
                let dst = &mut ctx[i * d + off..][..dh];
                for j in 0..ns {
                    let w = p[i * ns + j];
                    dst.iter_mut().zip(&v[j * d + off..][..dh]).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        self.linear(&a.out, &ctx, nq)
    }

    fn sample(&self, x: &[f64], input_time: &[f64], local_times: &[f64], out: &mut [f64]) -> Result<()> {
        let net = &self.model.net;
        let c = &net.config;
        let (m, n, vars, d, prior) = (c.m, c.n, c.vars, c.d_model, c.prior);
        let layout = &net.layout;

        let (g, be) = (self.param(layout.revin_gamma), self.param(layout.revin_beta));
        let mut mean = vec![0.0; vars];
        let mut std = vec![0.0; vars];
        for v in 0..vars {
            let mu = (0..m).map(|t| x[t * vars + v]).sum::<f64>() / m as f64;
            let var = (0..m).map(|t| (x[t * vars + v] - mu).powi(2)).sum::<f64>() / m as f64;
            mean[v] = mu;
            std[v] = (var + REVIN_EPS).sqrt();
        }
        let xn: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, xv)| {
                let v = i % vars;
                g[v] * ((xv - mean[v]) / std[v]) + be[v]
            })
            .collect();

        let global = match &layout.global {
            Some(gb) => {
                let mut h = self.embed(&gb.embed, &xn, input_time, net.pos_global.data(), m);
                for blk in &gb.blocks {
                    self.mlp_block(blk, &mut h, m, vars);
                }
                self.linear(&gb.bridge, &transpose(&h, m, vars), vars)
            }
            None => vec![0.0; vars * d],
        };

        let local = match &layout.query {
            QuerySource::Local { embed, blocks } => {
                let len = c.local_len();
                let starts = net.eval_row_starts();
                let r0 = starts[0];
                let mut seq = vec![0.0; (len - r0) * vars];
                for r in r0..prior {
                    seq[(r - r0) * vars..][..vars].copy_from_slice(&xn[(m - prior + r) * vars..][..vars]);
                }
                let time = &local_times[r0 * TIME_FEATURES..];
                let pos = &net.pos_local.data()[r0 * d..];
                let mut h = self.embed(embed, &seq, time, pos, len - r0);
                for (j, blk) in blocks.iter().enumerate() {
                    h = self.conv_block(blk, &h, len - starts[j], starts[j + 1] - starts[j], d);
                }
                h
            }
            QuerySource::Constant(id) => self.param(*id).to_vec(),
        };

        let fused = match &layout.fusion {
            Fusion::Attention(a) => self.attend(a, &local, n, &global, vars),
            Fusion::Swapped { attn, resize } => {
                let f = self.attend(attn, &global, vars, &local, n);
                let f = self.linear(resize, &transpose(&f, vars, d), d);
                transpose(&f, d, n)
            }
            Fusion::Concat { head } => {
                let cat = [global, local].concat();
                let f = self.linear(head, &transpose(&cat, vars + n, d), d);
                transpose(&f, d, n)
            }
        };

        if g.contains(&0.0) {
            return Err(Error::invalid("revin_denormalize", "affine scale gamma is zero"));
        }
        let y = self.linear(&layout.output, &fused, n);
        for (i, (o, yv)) in out.iter_mut().zip(&y).enumerate() {
            let v = i % vars;
            *o = std[v] * (yv - be[v]) / g[v] + mean[v];
        }
        Ok(())
    }
}

fn embedding_linears(e: &Embedding) -> [&Linear; 3] {
    [&e.value, &e.temporal, &e.post]
}

fn attention_linears(a: &Attention) -> [&Linear; 7] {
    [&a.q, &a.k, &a.v, &a.head_q, &a.head_k, &a.head_v, &a.out]
}
