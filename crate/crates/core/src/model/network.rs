//! Parameter layout and the forward pass.

use rand::{Rng, RngCore};

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::ingest::TIME_FEATURES;
use crate::numerics::kernels::positional_table;
use crate::numerics::{Activation, BatchMoments, Init, Mode, NormStats, ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const REVIN_EPS: f64 = 1e-5;
pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const GLOBAL_ACTIVATION: Activation = Activation::Relu;
pub(crate) const LOCAL_ACTIVATION: Activation = Activation::Tanh;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w: p.add(format!("{name}.weight"), &[inp, out], Init::FanIn(inp), rng),
            b: p.add(format!("{name}.bias"), &[out], Init::Zeros, rng),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn new<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, inp: usize, out: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w: p.add(format!("{name}.weight"), &[out, inp, k], Init::FanIn(inp * k), rng),
            b: p.add(format!("{name}.bias"), &[out], Init::Zeros, rng),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.conv1d(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Slot in the running-statistics bank.
    pub slot: usize,
}

impl Norm {
    fn new<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, ch: usize, slot: usize, rng: &mut R) -> Self {
        Self {
            gamma: p.add(format!("{name}.gamma"), &[ch], Init::Ones, rng),
            beta: p.add(format!("{name}.beta"), &[ch], Init::Zeros, rng),
            slot,
        }
    }
}

/// Value, positional and temporal embedding followed by a branch linear.
#[derive(Clone, Debug)]
pub(crate) struct Embedding {
    pub value: Linear,
    pub temporal: Linear,
    pub post: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpBlock {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    pub norm: Norm,
    pub convs: Vec<Conv>,
    pub merge: Conv,
}

#[derive(Clone, Debug)]
pub(crate) struct GlobalBranch {
    pub embed: Embedding,
    pub blocks: Vec<MlpBlock>,
    pub bridge: Linear,
}

#[derive(Clone, Debug)]
pub(crate) enum QuerySource {
    Local { embed: Embedding, blocks: Vec<ConvBlock> },
    /// `n×D` block shared by every sample.
    Constant(ParamId),
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub head_q: Linear,
    pub head_k: Linear,
    pub head_v: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) enum Fusion {
    Attention(Attention),
    /// Attention with swapped sources, then a `C→n` map along the key axis.
    Swapped { attn: Attention, resize: Linear },
    /// Concatenated `(C+n)` rows mapped to `n` rows.
    Concat { head: Linear },
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub revin_gamma: ParamId,
    pub revin_beta: ParamId,
    pub global: Option<GlobalBranch>,
    pub query: QuerySource,
    pub fusion: Fusion,
    pub output: Linear,
    pub norm_slots: usize,
}

fn embedding<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, c: &ModelConfig, post_out: usize, rng: &mut R) -> Embedding {
    Embedding {
        value: Linear::new(p, &format!("{name}.value"), c.vars, c.d_model, rng),
        temporal: Linear::new(p, &format!("{name}.temporal"), TIME_FEATURES, c.d_model, rng),
        post: Linear::new(p, &format!("{name}.post"), c.d_model, post_out, rng),
    }
}

fn attention<R: Rng + ?Sized>(p: &mut ParamStore, d: usize, rng: &mut R) -> Attention {
    Attention {
        q: Linear::new(p, "attn.q", d, d, rng),
        k: Linear::new(p, "attn.k", d, d, rng),
        v: Linear::new(p, "attn.v", d, d, rng),
        head_q: Linear::new(p, "attn.head_q", d, d, rng),
        head_k: Linear::new(p, "attn.head_k", d, d, rng),
        head_v: Linear::new(p, "attn.head_v", d, d, rng),
        out: Linear::new(p, "attn.out", d, d, rng),
    }
}

impl Layout {
    /// Registers every parameter in declaration order.
    pub fn build<R: Rng + ?Sized>(c: &ModelConfig, p: &mut ParamStore, rng: &mut R) -> Self {
        let d = c.d_model;
        let mut slots = 0;
        let mut next_slot = || {
            slots += 1;
            slots - 1
        };
        let revin_gamma = p.add("revin.gamma", &[c.vars], Init::Ones, rng);
        let revin_beta = p.add("revin.beta", &[c.vars], Init::Zeros, rng);

        let global = c.variant.has_global().then(|| GlobalBranch {
            embed: embedding(p, "global.embed", c, c.vars, rng),
            blocks: (0..c.mlp_blocks)
                .map(|i| MlpBlock {
                    norm: Norm::new(p, &format!("global.block{i}.norm"), c.vars, next_slot(), rng),
                    fc1: Linear::new(p, &format!("global.block{i}.fc1"), c.m, c.hidden, rng),
                    fc2: Linear::new(p, &format!("global.block{i}.fc2"), c.hidden, c.m, rng),
                })
                .collect(),
            bridge: Linear::new(p, "global.bridge", c.m, d, rng),
        });

        let query = if c.variant.has_local() {
            let embed = embedding(p, "local.embed", c, d, rng);
            let kernels = c.kernel_sizes();
            let blocks = (0..c.conv_blocks)
                .map(|i| ConvBlock {
                    norm: Norm::new(p, &format!("local.block{i}.norm"), d, next_slot(), rng),
                    convs: kernels
                        .iter()
                        .map(|&k| Conv::new(p, &format!("local.block{i}.conv{k}"), d, d, k, rng))
                        .collect(),
                    merge: Conv::new(p, &format!("local.block{i}.merge"), kernels.len() * d, d, 1, rng),
                })
                .collect();
            QuerySource::Local { embed, blocks }
        } else {
            QuerySource::Constant(p.add("local.query", &[c.n, d], Init::FanIn(d), rng))
        };

        let fusion = match c.variant {
            Variant::NoCa => Fusion::Concat {
                head: Linear::new(p, "fusion.head", c.vars + c.n, c.n, rng),
            },
            Variant::SwappedCa => Fusion::Swapped {
                attn: attention(p, d, rng),
                resize: Linear::new(p, "fusion.resize", c.vars, c.n, rng),
            },
            _ => Fusion::Attention(attention(p, d, rng)),
        };
        let output = Linear::new(p, "output", d, c.vars, rng);
        Layout {
            revin_gamma,
            revin_beta,
            global,
            query,
            fusion,
            output,
            norm_slots: slots,
        }
    }
}

/// Running batch-norm statistics for one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    /// Unbiased running variance.
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(ch: usize) -> Self {
        Self {
            mean: vec![0.0; ch],
            var: vec![1.0; ch],
            initialized: false,
        }
    }

    /// Exponential moving update from one train-mode batch.
    pub fn update(&mut self, m: &BatchMoments) {
        let unbias = m.count as f64 / (m.count.max(2) - 1) as f64;
        for (i, (mu, v)) in m.mean.iter().zip(&m.var).enumerate() {
            self.mean[i] = (1.0 - BN_MOMENTUM) * self.mean[i] + BN_MOMENTUM * mu;
            self.var[i] = (1.0 - BN_MOMENTUM) * self.var[i] + BN_MOMENTUM * v * unbias;
        }
        self.initialized = true;
    }
}

/// One batch of model inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `s×m×C`
    pub inputs: Tensor,
    /// `s×m×6`
    pub input_time: Tensor,
    /// `s×n×6`
    pub future_time: Tensor,
    /// `s×n×C`
    pub targets: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_windows(windows: &[&crate::ingest::WindowSample]) -> Result<Self> {
        let first = windows.first().ok_or(Error::EmptySplit("batch"))?;
        let (s, m, n, c) = (windows.len(), first.input_steps(), first.target_steps(), crate::ingest::VARIABLES);
        let cat = |f: &dyn Fn(&crate::ingest::WindowSample) -> &[f64]| windows.iter().flat_map(|w| f(w).iter().copied()).collect();
        Ok(Self {
            inputs: Tensor::new([s, m, c], cat(&|w| &w.input))?,
            input_time: Tensor::new([s, m, TIME_FEATURES], cat(&|w| &w.input_time))?,
            future_time: Tensor::new([s, n, TIME_FEATURES], cat(&|w| &w.target_time))?,
            targets: Tensor::new([s, n, c], cat(&|w| &w.target))?,
        })
    }
}

/// Per-sample shapes of the intermediate tensors of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageShapes {
    /// Global branch after embedding (`m×C`).
    pub global_embedding: Option<Vec<usize>>,
    /// Bridged global features (`C×D`).
    pub global_features: Vec<usize>,
    /// Local branch after embedding (`(R+n)×D`).
    pub local_embedding: Option<Vec<usize>>,
    /// Sliced local features (`n×D`).
    pub local_features: Vec<usize>,
    /// Prediction (`n×C`).
    pub output: Vec<usize>,
}

pub struct ForwardOutput {
    pub prediction: Var,
    pub shapes: StageShapes,
    /// Batch moments of each normalization layer (train mode only).
    pub moments: Vec<Option<BatchMoments>>,
}

/// The model without its parameter values: configuration, layout, running
/// statistics and constant tables.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub(crate) layout: Layout,
    pub running: Vec<RunningStats>,
    pub(crate) pos_global: Tensor,
    pub(crate) pos_local: Tensor,
    /// Skip local rows that cannot reach the output in evaluation mode.
    pub(crate) prune_eval: bool,
}

fn expect_stage(tape: &Tape<'_>, v: Var, stage: &'static str, expected: &[usize]) -> Result<Vec<usize>> {
    let got = tape.shape(v)[1..].to_vec();
    if got != expected {
        return Err(Error::Stage {
            stage,
            expected: expected.to_vec(),
            got,
        });
    }
    Ok(got)
}

impl Network {
    pub(crate) fn new(config: ModelConfig, layout: Layout) -> Self {
        let d = config.d_model;
        let pos_global = Tensor::from_parts(vec![config.m, d], positional_table(config.m, d));
        let pos_local = Tensor::from_parts(vec![config.local_len(), d], positional_table(config.local_len(), d));
        let running = (0..layout.norm_slots)
            .map(|_| RunningStats::new(0))
            .collect::<Vec<_>>();
        let mut net = Self {
            config,
            layout,
            running,
            pos_global,
            pos_local,
            prune_eval: true,
        };
        net.reset_running();
        net
    }

    fn norm_channels(&self) -> Vec<usize> {
        let mut ch = vec![0; self.layout.norm_slots];
        if let Some(g) = &self.layout.global {
            g.blocks.iter().for_each(|b| ch[b.norm.slot] = self.config.vars);
        }
        if let QuerySource::Local { blocks, .. } = &self.layout.query {
            blocks.iter().for_each(|b| ch[b.norm.slot] = self.config.d_model);
        }
        ch
    }

    /// First local row each conv block must read (entry `j`), ending with
    /// the first row the slice needs. Each block widens the window by half
    /// the largest kernel.
    pub(crate) fn eval_row_starts(&self) -> Vec<usize> {
        let blocks = self.config.conv_blocks;
        let half = self.config.kernel_sizes().iter().max().copied().unwrap_or(1) / 2;
        let mut starts = vec![self.config.prior; blocks + 1];
        for j in (0..blocks).rev() {
            starts[j] = starts[j + 1].saturating_sub(half);
        }
        starts
    }

    pub(crate) fn reset_running(&mut self) {
        self.running = self.norm_channels().into_iter().map(RunningStats::new).collect();
    }

    pub fn update_running(&mut self, moments: &[Option<BatchMoments>]) {
        for (r, m) in self.running.iter_mut().zip(moments) {
            if let Some(m) = m {
                r.update(m);
            }
        }
    }

    pub(crate) fn check_batch(&self, b: &Batch) -> Result<usize> {
        let c = &self.config;
        let s = b.inputs.shape().first().copied().unwrap_or(0);
        let checks: [(&'static str, &Tensor, [usize; 3]); 4] = [
            ("inputs", &b.inputs, [s, c.m, c.vars]),
            ("input_time", &b.input_time, [s, c.m, TIME_FEATURES]),
            ("future_time", &b.future_time, [s, c.n, TIME_FEATURES]),
            ("targets", &b.targets, [s, c.n, c.vars]),
        ];
        for (stage, t, expected) in checks {
            if t.shape() != expected || s == 0 {
                return Err(Error::Stage {
                    stage,
                    expected: expected.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(s)
    }

    fn embed(&self, tape: &mut Tape<'_>, e: &Embedding, values: Var, time: Tensor, pos: &Tensor, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let v = e.value.apply(tape, values)?;
        let p = tape.constant(pos.clone());
        let v = tape.add(v, p)?;
        let t = tape.constant(time);
        let t = e.temporal.apply(tape, t)?;
        let sum = tape.add(v, t)?;
        let sum = tape.dropout(sum, self.config.dropout, reborrow(rng))?;
        e.post.apply(tape, sum)
    }

    fn norm(&self, tape: &mut Tape<'_>, n: &Norm, x: Var, mode: Mode, moments: &mut [Option<BatchMoments>]) -> Result<Var> {
        let (g, b) = (tape.param(n.gamma), tape.param(n.beta));
        let stats = match mode {
            Mode::Train => NormStats::Batch { eps: BN_EPS },
            Mode::Eval => {
                let r = &self.running[n.slot];
                if !r.initialized {
                    return Err(Error::UninitializedStats);
                }
                NormStats::Running {
                    mean: &r.mean,
                    var: &r.var,
                    eps: BN_EPS,
                }
            }
        };
        let (y, m) = tape.batch_norm(x, g, b, stats)?;
        moments[n.slot] = m;
        Ok(y)
    }

    pub(crate) fn mlp_block(&self, tape: &mut Tape<'_>, blk: &MlpBlock, x: Var, mode: Mode, moments: &mut [Option<BatchMoments>]) -> Result<Var> {
        let h = tape.transpose12(x)?;
        let h = self.norm(tape, &blk.norm, h, mode, moments)?;
        let z = blk.fc1.apply(tape, h)?;
        let z = GLOBAL_ACTIVATION.apply(tape, z)?;
        let z = blk.fc2.apply(tape, z)?;
        let z = tape.transpose12(z)?;
        tape.add(x, z)
    }

    pub(crate) fn conv_block(&self, tape: &mut Tape<'_>, blk: &ConvBlock, x: Var, mode: Mode, moments: &mut [Option<BatchMoments>]) -> Result<Var> {
        let t = tape.transpose12(x)?;
        let h = self.norm(tape, &blk.norm, t, mode, moments)?;
        let mut scales = Vec::with_capacity(blk.convs.len());
        for conv in &blk.convs {
            let y = conv.apply(tape, h)?;
            scales.push(LOCAL_ACTIVATION.apply(tape, y)?);
        }
        let cat = if scales.len() == 1 { scales[0] } else { tape.concat1(&scales)? };
        let p = blk.merge.apply(tape, cat)?;
        let out = tape.add(p, t)?;
        tape.transpose12(out)
    }

    /// Multi-head attention of `query` rows over `source` rows.
    pub(crate) fn attend(&self, tape: &mut Tape<'_>, a: &Attention, query: Var, source: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let h = self.config.heads;
        let q = a.q.apply(tape, query)?;
        let k = a.k.apply(tape, source)?;
        let v = a.v.apply(tape, source)?;
        let q = a.head_q.apply(tape, q)?;
        let k = a.head_k.apply(tape, k)?;
        let v = a.head_v.apply(tape, v)?;
        let (q, k, v) = (tape.split_heads(q, h)?, tape.split_heads(k, h)?, tape.split_heads(v, h)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.merge_heads(ctx, h)?;
        let out = a.out.apply(tape, ctx)?;
        tape.dropout(out, self.config.dropout, reborrow(rng))
    }

    /// Records the full forward pass on `tape`. `rng` enables dropout.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, mode: Mode, mut rng: Option<&mut dyn RngCore>) -> Result<ForwardOutput> {
        let c = &self.config;
        let (m, n, vars, d) = (c.m, c.n, c.vars, c.d_model);
        let s = self.check_batch(batch)?;
        let mut moments = vec![None; self.layout.norm_slots];
        let mut shapes = StageShapes::default();

        let x = tape.constant(batch.inputs.clone());
        let (gamma, beta) = (tape.param(self.layout.revin_gamma), tape.param(self.layout.revin_beta));
        let (xn, revin) = tape.revin_normalize(x, gamma, beta, REVIN_EPS)?;

        let global = match &self.layout.global {
            Some(g) => {
                let mut h = self.embed(tape, &g.embed, xn, batch.input_time.clone(), &self.pos_global, &mut rng)?;
                shapes.global_embedding = Some(expect_stage(tape, h, "global_embedding", &[m, vars])?);
                for blk in &g.blocks {
                    h = self.mlp_block(tape, blk, h, mode, &mut moments)?;
                }
                let ht = tape.transpose12(h)?;
                g.bridge.apply(tape, ht)?
            }
            None => tape.constant(Tensor::zeros([s, vars, d])),
        };
        shapes.global_features = expect_stage(tape, global, "global_features", &[vars, d])?;

        let local = match &self.layout.query {
            QuerySource::Local { embed, blocks } => {
                let recent = tape.slice1(xn, m - c.prior, c.prior)?;
                let zeros = tape.constant(Tensor::zeros([s, n, vars]));
                let seq = tape.concat1(&[recent, zeros])?;
                let mut h = self.embed(tape, embed, seq, local_time(batch, c.prior), &self.pos_local, &mut rng)?;
                shapes.local_embedding = Some(expect_stage(tape, h, "local_embedding", &[c.local_len(), d])?);
                if mode == Mode::Eval && self.prune_eval {
                    // Running statistics make every block position-local, so
                    // only the receptive field of the last n rows is needed.
                    let starts = self.eval_row_starts();
                    let len = c.local_len();
                    h = tape.slice1(h, starts[0], len - starts[0])?;
                    for (j, blk) in blocks.iter().enumerate() {
                        h = self.conv_block(tape, blk, h, mode, &mut moments)?;
                        h = tape.slice1(h, starts[j + 1] - starts[j], len - starts[j + 1])?;
                    }
                    tape.slice1(h, c.prior - starts[blocks.len()], n)?
                } else {
                    for blk in blocks {
                        h = self.conv_block(tape, blk, h, mode, &mut moments)?;
                    }
                    tape.slice1(h, c.prior, n)?
                }
            }
            QuerySource::Constant(id) => {
                let q = tape.param(*id);
                tape.broadcast_batch(q, s)?
            }
        };
        shapes.local_features = expect_stage(tape, local, "local_features", &[n, d])?;

        let fused = match &self.layout.fusion {
            Fusion::Attention(a) => self.attend(tape, a, local, global, &mut rng)?,
            Fusion::Swapped { attn, resize } => {
                let f = self.attend(tape, attn, global, local, &mut rng)?;
                let f = tape.transpose12(f)?;
                let f = resize.apply(tape, f)?;
                tape.transpose12(f)?
            }
            Fusion::Concat { head } => {
                let cat = tape.concat1(&[global, local])?;
                let t = tape.transpose12(cat)?;
                let f = head.apply(tape, t)?;
                tape.transpose12(f)?
            }
        };
        expect_stage(tape, fused, "fusion", &[n, d])?;

        let y = self.layout.output.apply(tape, fused)?;
        let prediction = tape.revin_denormalize(y, gamma, beta, &revin)?;
        shapes.output = expect_stage(tape, prediction, "output", &[n, vars])?;
        Ok(ForwardOutput {
            prediction,
            shapes,
            moments,
        })
    }
}

fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

/// Time features of the last `prior` input steps followed by the future steps.
pub(crate) fn local_time(batch: &Batch, prior: usize) -> Tensor {
    let (s, m, f) = (batch.input_time.shape()[0], batch.input_time.shape()[1], TIME_FEATURES);
    let n = batch.future_time.shape()[1];
    let (inp, fut) = (batch.input_time.data(), batch.future_time.data());
    let mut out = Vec::with_capacity(s * (prior + n) * f);
    for b in 0..s {
        out.extend_from_slice(&inp[(b * m + m - prior) * f..(b + 1) * m * f]);
        out.extend_from_slice(&fut[b * n * f..(b + 1) * n * f]);
    }
    Tensor::from_parts(vec![s, prior + n, f], out)
}
