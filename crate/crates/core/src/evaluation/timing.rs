use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::WindowSample;
use crate::model::{Batch, Model};
use crate::numerics::par;

/// Untimed inferences run before measuring.
pub const WARMUP_RUNS: usize = 10;
/// Timed passes over the sample set.
pub const REPETITIONS: usize = 3;

/// Per-sample inference wall time in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Mean over every timed inference of every repetition.
    pub mean_ms: f64,
    /// Median of the per-repetition means.
    pub median_ms: f64,
    pub samples: usize,
}

/// Times batch-1 eval-mode inference over `windows` on a single thread.
/// Batches are assembled and weights packed before the clock starts; RevIN
/// and the inverse transform are part of the forward pass and are timed.
pub fn time_inference(model: &Model, windows: &[WindowSample]) -> Result<Timing> {
    if windows.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let batches = windows
        .iter()
        .map(|w| Batch::from_windows(&[w]))
        .collect::<Result<Vec<_>>>()?;
    let predictor = model.predictor()?;
    par::single_threaded(|| {
        for b in batches.iter().cycle().take(WARMUP_RUNS) {
            predictor.predict(b)?;
        }
        let mut reps = Vec::with_capacity(REPETITIONS);
        for _ in 0..REPETITIONS {
            let start = Instant::now();
            for b in &batches {
                std::hint::black_box(predictor.predict(b)?);
            }
            reps.push(start.elapsed().as_secs_f64() * 1e3 / batches.len() as f64);
        }
        let mean_ms = reps.iter().sum::<f64>() / reps.len() as f64;
        reps.sort_by(f64::total_cmp);
        Ok(Timing {
            mean_ms,
            median_ms: reps[reps.len() / 2],
            samples: batches.len(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synthetic_dataset, Split, SyntheticSpec};
    use crate::model::ModelConfig;

    #[test]
    fn reports_positive_times_for_every_sample() {
        let c = ModelConfig { m: 12, n: 3, prior: 6, d_model: 8, hidden: 16, heads: 2, ..Default::default() };
        let mut model = Model::new(c, 1).unwrap();
        model.freeze_initial_stats();
        let ds = synthetic_dataset(&SyntheticSpec { length: 300, min_window: 15, ..Default::default() }).unwrap();
        let w = ds.windows(Split::Test, 12, 3);
        let t = time_inference(&model, &w[..7]).unwrap();
        assert_eq!(t.samples, 7);
        assert!(t.mean_ms > 0.0 && t.median_ms > 0.0);
        assert!(time_inference(&model, &[]).is_err());
    }
}
