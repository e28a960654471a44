use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Consecutive non-improving epochs that stop training.
    pub patience: usize,
    pub batch_size: usize,
    /// Learning rate of the first epoch.
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Huber threshold.
    pub delta: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 5,
            batch_size: 32,
            lr: 2e-5,
            lr_decay: 0.5,
            delta: 0.001,
            seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.patience == 0 {
            return fail("patience: must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size: must be at least 1");
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return fail("delta: must be positive");
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail("lr: must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay: must lie in (0, 1]");
        }
        if self.seeds.is_empty() {
            return fail("seeds: at least one seed is required");
        }
        Ok(())
    }
}

/// Learning rate of epoch `epoch` (1-based): `lr0 · decay^(epoch−1)`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch.saturating_sub(1) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Improved,
    Waiting,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            counter: 0,
        }
    }

    /// Records one validation loss; only a strict decrease counts as improvement.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Observation {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.counter = 0;
            Observation::Improved
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                Observation::Stop
            } else {
                Observation::Waiting
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub patience: usize,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes") + "\n"
    }
}

/// Something that can be trained one epoch at a time.
pub trait Learner {
    type Snapshot: Clone;

    /// Runs one epoch at learning rate `lr`; returns the mean training loss.
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64>;
    fn validate(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
}

/// Progress of a run, enough to continue it.
#[derive(Clone, Debug)]
pub struct FitState<S> {
    /// First epoch still to run (1-based).
    pub next_epoch: usize,
    pub stopper: EarlyStopping,
    pub best: Option<S>,
    pub log: Vec<EpochRecord>,
    pub finished: bool,
}

impl<S> FitState<S> {
    pub fn new(patience: usize) -> Self {
        Self {
            next_epoch: 1,
            stopper: EarlyStopping::new(patience),
            best: None,
            log: Vec::new(),
            finished: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<S> {
    pub best: S,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Runs epochs until the budget is spent or validation stops improving.
/// `after_epoch` sees the state after every epoch (for logs and resume files).
pub fn fit<L: Learner>(
    learner: &mut L,
    cfg: &TrainConfig,
    mut state: FitState<L::Snapshot>,
    mut after_epoch: impl FnMut(&FitState<L::Snapshot>, &L) -> Result<()>,
) -> Result<FitOutcome<L::Snapshot>> {
    let started = Instant::now();
    let mut stopped_early = false;
    while !state.finished && state.next_epoch <= cfg.epochs {
        let epoch = state.next_epoch;
        let lr = lr_schedule(cfg.lr, cfg.lr_decay, epoch);
        let train_loss = learner.train_epoch(epoch, lr)?;
        let val_loss = learner.validate()?;
        let obs = state.stopper.observe(epoch, val_loss);
        if obs == Observation::Improved {
            state.best = Some(learner.snapshot());
        }
        state.log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            patience: state.stopper.counter,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        state.next_epoch += 1;
        if obs == Observation::Stop {
            stopped_early = true;
            state.finished = true;
        }
        after_epoch(&state, learner)?;
    }
    state.finished = true;
    let best = state.best.ok_or(Error::EmptySplit("train"))?;
    Ok(FitOutcome {
        best,
        best_epoch: state.stopper.best_epoch,
        best_val_loss: state.stopper.best,
        log: state.log,
        stopped_early: stopped_early || state.stopper.counter >= state.stopper.patience,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed validation curve; the snapshot is the epoch number.
    struct Scripted {
        losses: Vec<f64>,
        epoch: usize,
    }

    impl Learner for Scripted {
        type Snapshot = usize;
        fn train_epoch(&mut self, epoch: usize, _lr: f64) -> Result<f64> {
            self.epoch = epoch;
            Ok(0.0)
        }
        fn validate(&mut self) -> Result<f64> {
            Ok(self.losses[self.epoch - 1])
        }
        fn snapshot(&self) -> usize {
            self.epoch
        }
    }

    fn run(losses: Vec<f64>, patience: usize) -> FitOutcome<usize> {
        let cfg = TrainConfig { patience, ..Default::default() };
        let mut l = Scripted { losses, epoch: 0 };
        fit(&mut l, &cfg, FitState::new(patience), |_, _| Ok(())).unwrap()
    }

    #[test]
    fn plateau_stops_after_patience() {
        let out = run(vec![5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], 5);
        assert_eq!(out.log.len(), 8);
        assert_eq!(out.best, 3);
        assert_eq!(out.best_epoch, 3);
        assert!(out.stopped_early);
        assert_eq!(out.log.iter().map(|r| r.patience).collect::<Vec<_>>(), [0, 0, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn improving_curve_runs_every_epoch() {
        let out = run((0..50).map(|e| 100.0 - e as f64).collect(), 5);
        assert_eq!(out.log.len(), 50);
        assert_eq!(out.best, 50);
        assert!(!out.stopped_early);
    }

    #[test]
    fn schedule_halves_per_epoch() {
        assert_eq!(lr_schedule(2e-5, 0.5, 1), 2e-5);
        assert_eq!(lr_schedule(2e-5, 0.5, 2), 1e-5);
        assert!(lr_schedule(2e-5, 0.5, 1000) > 0.0);
        let out = run((0..50).map(|e| 50.0 - e as f64).collect(), 5);
        assert_eq!(out.log.iter().map(|r| r.lr).collect::<Vec<_>>()[..2], [2e-5, 1e-5]);
    }

    #[test]
    fn config_constraints() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
