use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fit::{Learner, TrainConfig};
use super::loss::batch_loss;
use crate::error::{Error, Result};
use crate::ingest::WindowSample;
use crate::model::{Batch, Model};
use crate::numerics::{Adam, Mode, Tape, Tensor};

/// Batch size used for evaluation-mode passes.
const EVAL_BATCH: usize = 256;

/// Trains a [`Model`] on in-memory windows.
pub struct MmctpLearner {
    pub model: Model,
    pub adam: Adam,
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    batch_size: usize,
    delta: f64,
    seed: u64,
}

impl MmctpLearner {
    pub fn new(model: Model, train: Vec<WindowSample>, val: Vec<WindowSample>, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(Error::EmptySplit("val"));
        }
        let adam = Adam::new(&model.params);
        Ok(Self {
            model,
            adam,
            train,
            val,
            batch_size: cfg.batch_size,
            delta: cfg.delta,
            seed,
        })
    }

    /// Generator for one epoch: the same `(seed, epoch)` always yields the
    /// same shuffle and dropout masks, which makes resumed runs exact.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// One optimization step on `batch`; returns the loss.
    pub fn step(&mut self, batch: &Batch, lr: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.model.params.zero_grads();
        let (loss, grads, moments) = {
            let mut tape = Tape::new(&self.model.params);
            let out = self.model.net.forward(&mut tape, batch, Mode::Train, Some(rng))?;
            let loss = tape.huber_loss(out.prediction, &batch.targets, self.delta)?;
            (tape.value(loss).item()?, tape.backward(loss)?, out.moments)
        };
        self.model.params.accumulate(&grads)?;
        self.model.net.update_running(&moments);
        self.adam.step(&mut self.model.params, lr)?;
        Ok(loss)
    }

    /// Eval-mode loss over a window set, averaged over all samples.
    pub fn eval_loss(&self, windows: &[WindowSample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in windows.chunks(EVAL_BATCH) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            let batch = Batch::from_windows(&refs)?;
            let pred = self.model.predict(&batch)?;
            total += batch_loss(&pred, &batch.targets, self.delta)? * chunk.len() as f64;
        }
        Ok(total / windows.len() as f64)
    }
}

/// Eval-mode predictions for `windows`, `s×n×C`.
pub fn predict_windows(model: &Model, windows: &[WindowSample]) -> Result<Tensor> {
    let mut out = Vec::new();
    let mut shape = None;
    for chunk in windows.chunks(EVAL_BATCH) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let pred = model.predict(&Batch::from_windows(&refs)?)?;
        shape.get_or_insert_with(|| pred.shape()[1..].to_vec());
        out.extend_from_slice(pred.data());
    }
    let inner = shape.ok_or(Error::EmptySplit("test"))?;
    Tensor::new([windows.len(), inner[0], inner[1]], out)
}

impl Learner for MmctpLearner {
    type Snapshot = Model;

    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (k, idx) in order.chunks(self.batch_size).enumerate() {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &self.train[i]).collect();
            let batch = Batch::from_windows(&refs)?;
            let loss = match self.step(&batch, lr, &mut rng) {
                Err(Error::NonFinite { .. }) => Err(Error::Divergence { epoch, batch: k + 1 }),
                Ok(l) if !l.is_finite() => Err(Error::Divergence { epoch, batch: k + 1 }),
                other => other,
            }?;
            total += loss * idx.len() as f64;
        }
        Ok(total / self.train.len() as f64)
    }

    fn validate(&mut self) -> Result<f64> {
        self.eval_loss(&self.val)
    }

    fn snapshot(&self) -> Model {
        self.model.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synthetic_dataset, Split, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::training::{fit, FitState};

    fn small() -> (ModelConfig, Vec<WindowSample>, Vec<WindowSample>) {
        let c = ModelConfig { m: 12, n: 3, prior: 6, d_model: 8, hidden: 16, heads: 2, ..Default::default() };
        let ds = synthetic_dataset(&SyntheticSpec { length: 400, min_window: 15, ..Default::default() }).unwrap();
        (c, ds.windows(Split::Train, 12, 3), ds.windows(Split::Val, 12, 3))
    }

    #[test]
    fn identical_batches_give_identical_gradients() {
        let (c, train, val) = small();
        let cfg = TrainConfig::default();
        let mut l = MmctpLearner::new(Model::new(c, 1).unwrap(), train, val, &cfg, 1).unwrap();
        let refs: Vec<&WindowSample> = l.train[..4].iter().collect();
        let batch = Batch::from_windows(&refs).unwrap();
        let grads = |l: &mut MmctpLearner| {
            l.model.params.zero_grads();
            let mut tape = Tape::new(&l.model.params);
            let out = l.model.net.forward(&mut tape, &batch, Mode::Train, None).unwrap();
            let loss = tape.huber_loss(out.prediction, &batch.targets, 0.001).unwrap();
            let g = tape.backward(loss).unwrap();
            drop(tape);
            l.model.params.accumulate(&g).unwrap();
            l.model.params.iter().map(|(_, p)| p.tensor.grad().unwrap().to_vec()).collect::<Vec<_>>()
        };
        let (a, b) = (grads(&mut l), grads(&mut l));
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_run() {
        let (c, train, val) = small();
        let cfg = TrainConfig { epochs: 2, lr: 1e-3, ..Default::default() };
        let run = || {
            let mut l = MmctpLearner::new(Model::new(c.clone(), 4).unwrap(), train.clone(), val.clone(), &cfg, 4).unwrap();
            let out = fit(&mut l, &cfg, FitState::new(cfg.patience), |_, _| Ok(())).unwrap();
            (out.log.iter().map(|r| (r.train_loss, r.val_loss)).collect::<Vec<_>>(), out.best.to_bytes("").unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_validation_is_rejected() {
        let (c, train, _) = small();
        let r = MmctpLearner::new(Model::new(c, 0).unwrap(), train, Vec::new(), &TrainConfig::default(), 0);
        assert!(matches!(r, Err(Error::EmptySplit("val"))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (c, train, val) = small();
        let cfg = TrainConfig { delta: 1e6, ..Default::default() };
        let mut l = MmctpLearner::new(Model::new(c, 0).unwrap(), train, val, &cfg, 0).unwrap();
        let mut err = None;
        for epoch in 1..=3 {
            if let Err(e) = l.train_epoch(epoch, 1e150) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(Error::Divergence { .. })), "{err:?}");
    }
}
