//! The forecaster: RevIN, a global time-axis MLP branch, a local multi-scale
//! convolution branch, cross-attention fusion and an output projection.

mod checkpoint;
mod config;
mod infer;
mod network;

pub use checkpoint::CHECKPOINT_VERSION;
pub use config::{ModelConfig, Variant};
pub use infer::Predictor;
pub use network::{Batch, ForwardOutput, Network, RunningStats, StageShapes};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Mode, ParamStore, Tape, Tensor};

/// Parameters plus everything needed to run them.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = network::Layout::build(&config, &mut params, &mut rng);
        Ok(Self {
            net: Network::new(config, layout),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Evaluation-mode prediction, `s×n×C`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.predict_with_shapes(batch)?.0)
    }

    pub fn predict_with_shapes(&self, batch: &Batch) -> Result<(Tensor, StageShapes)> {
        let mut tape = Tape::new(&self.params);
        let out = self.net.forward(&mut tape, batch, Mode::Eval, None)?;
        Ok((tape.value(out.prediction).clone(), out.shapes))
    }

    /// Graph-free evaluator with this model's weights packed for reuse.
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Predictor::new(self)
    }

    /// Sets every batch-norm running mean to 0 and variance to 1 and marks
    /// them usable, as if frozen at their initial values.
    pub fn freeze_initial_stats(&mut self) {
        for r in &mut self.net.running {
            r.mean.iter_mut().for_each(|v| *v = 0.0);
            r.var.iter_mut().for_each(|v| *v = 1.0);
            r.initialized = true;
        }
    }
}
