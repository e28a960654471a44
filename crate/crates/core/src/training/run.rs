use std::path::Path;

use super::fit::{fit, EpochRecord, FitOutcome, FitState, TrainConfig};
use super::learner::MmctpLearner;
use super::resume::{load_resume, save_resume};
use crate::error::{Error, Result};
use crate::ingest::WindowSample;
use crate::model::{Model, ModelConfig};

/// Trains one seed from scratch, or continues from `resume` when that file
/// exists. With `resume` set, progress is written there after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_seed(
    config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    stats_digest: &str,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitOutcome<Model>> {
    cfg.validate()?;
    let mut learner = MmctpLearner::new(Model::new(config.clone(), seed)?, train, val, cfg, seed)?;
    let mut state = FitState::new(cfg.patience);
    if let Some(path) = resume.filter(|p| p.exists()) {
        let point = load_resume(path)?;
        if point.stats_digest != stats_digest {
            return Err(Error::Mismatch(format!("{} was written for different dataset statistics", path.display())));
        }
        if point.model.config() != config {
            return Err(Error::Mismatch(format!("{} was written for a different model config", path.display())));
        }
        learner.model = point.model;
        learner.adam = point.adam;
        state = point.state;
    }
    fit(&mut learner, cfg, state, |s, l| {
        if let Some(rec) = s.log.last() {
            on_epoch(rec)?;
        }
        match resume {
            Some(path) => save_resume(path, s, l, stats_digest),
            None => Ok(()),
        }
    })
}
