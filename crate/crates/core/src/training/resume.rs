//! Resume files: current model, optimizer moments, best model and the
//! early-stopping counters, written after every epoch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::{EarlyStopping, EpochRecord, FitState};
use super::learner::MmctpLearner;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::Adam;

const MAGIC: &[u8; 8] = b"MMCTPRSM";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Progress {
    next_epoch: usize,
    finished: bool,
    stopper: EarlyStopping,
    log: Vec<EpochRecord>,
}

/// Everything needed to continue an interrupted run.
pub struct ResumePoint {
    pub model: Model,
    pub adam: Adam,
    pub state: FitState<Model>,
    pub stats_digest: String,
}

pub fn save_resume(path: &Path, state: &FitState<Model>, learner: &MmctpLearner, stats_digest: &str) -> Result<()> {
    let mut w = Writer::header(MAGIC, VERSION);
    let progress = Progress {
        next_epoch: state.next_epoch,
        finished: state.finished,
        stopper: state.stopper.clone(),
        log: state.log.clone(),
    };
    w.str(&serde_json::to_string(&progress)?);
    w.str(stats_digest);
    w.bytes(&learner.model.to_bytes(stats_digest)?);
    match &state.best {
        Some(best) => {
            w.u64(1);
            w.bytes(&best.to_bytes(stats_digest)?);
        }
        None => w.u64(0),
    }
    learner.adam.encode(&mut w);
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    write_file(&tmp, &w.buf)?;
    std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))
}

pub fn load_resume(path: &Path) -> Result<ResumePoint> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(&bytes, path, MAGIC, VERSION)?;
    let progress: Progress = serde_json::from_str(&r.str()?)?;
    let stats_digest = r.str()?;
    let (model, _) = Model::from_bytes(r.bytes()?, path)?;
    let best = match r.u64()? {
        0 => None,
        _ => Some(Model::from_bytes(r.bytes()?, path)?.0),
    };
    let adam = Adam::decode(&mut r)?;
    r.finish()?;
    if !adam.matches(&model.params) {
        return Err(crate::Error::Mismatch("optimizer state does not match the model".into()));
    }
    Ok(ResumePoint {
        model,
        adam,
        state: FitState {
            next_epoch: progress.next_epoch,
            stopper: progress.stopper,
            best,
            log: progress.log,
            finished: progress.finished,
        },
        stats_digest,
    })
}
