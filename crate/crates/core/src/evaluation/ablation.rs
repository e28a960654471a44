use serde::{Deserialize, Serialize};

use super::report::{seed_metrics, MetricsReport, ReportContext, DEFAULT_LATENCY_THRESHOLD_MS};
use crate::error::Result;
use crate::ingest::{PreparedDataset, Split};
use crate::model::{ModelConfig, Variant};
use crate::training::{train_seed, TrainConfig};

/// A model and training setup to run on one prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub dataset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub latency_threshold_ms: f64,
}

impl Experiment {
    pub fn new(dataset: impl Into<String>, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            dataset: dataset.into(),
            model,
            train,
            latency_threshold_ms: DEFAULT_LATENCY_THRESHOLD_MS,
        }
    }

    pub fn context(&self, ds: &PreparedDataset, params: usize) -> ReportContext {
        ReportContext {
            dataset: self.dataset.clone(),
            raw_interval: ds.raw_interval,
            interval: ds.interval,
            m: self.model.m,
            n: self.model.n,
            variant: self.model.variant,
            params,
            latency_threshold_ms: self.latency_threshold_ms,
        }
    }
}

/// Trains `variant` on every seed with everything else held fixed and
/// reports its test metrics.
pub fn run_ablation(variant: Variant, exp: &Experiment, ds: &PreparedDataset) -> Result<MetricsReport> {
    let exp = Experiment {
        model: ModelConfig { variant, ..exp.model.clone() },
        ..exp.clone()
    };
    exp.model.validate()?;
    exp.train.validate()?;
    let (m, n) = (exp.model.m, exp.model.n);
    let (train, val, test) = (ds.windows(Split::Train, m, n), ds.windows(Split::Val, m, n), ds.windows(Split::Test, m, n));
    let digest = ds.stats.digest();
    let mut per_seed = Vec::with_capacity(exp.train.seeds.len());
    let mut params = 0;
    for &seed in &exp.train.seeds {
        let out = train_seed(&exp.model, &exp.train, seed, train.clone(), val.clone(), &digest, None, |_| Ok(()))?;
        params = out.best.param_count();
        per_seed.push(seed_metrics(seed, &out.best, &test, &ds.stats, Some(out.best_epoch))?.0);
    }
    MetricsReport::new(exp.context(ds, params), per_seed, &test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synthetic_dataset, SyntheticSpec};
    use crate::model::Model;

    #[test]
    fn every_variant_reports_one_comparable_row() {
        let ds = synthetic_dataset(&SyntheticSpec { length: 260, min_window: 15, ..Default::default() }).unwrap();
        let model = ModelConfig { m: 12, n: 3, prior: 6, d_model: 8, hidden: 16, heads: 2, ..Default::default() };
        let train = TrainConfig { epochs: 1, seeds: vec![5], lr: 1e-3, ..Default::default() };
        let exp = Experiment::new("synthetic", model.clone(), train);
        let reports: Vec<_> = Variant::ALL.iter().map(|&v| run_ablation(v, &exp, &ds).unwrap()).collect();
        assert_eq!(reports.len(), 6);
        for (r, v) in reports.iter().zip(Variant::ALL) {
            assert_eq!(r.context.variant, v);
            assert_eq!(r.samples, reports[0].samples);
            assert_eq!(r.baseline_mse, reports[0].baseline_mse);
            assert!(r.mse >= 0.0 && r.mae >= 0.0);
            let fresh = Model::new(ModelConfig { variant: v, ..model.clone() }, 0).unwrap();
            assert_eq!(r.context.params, fresh.param_count());
        }
        let full = &reports[0];
        let no_mscnn = reports.iter().find(|r| r.context.variant == Variant::NoMscnn).unwrap();
        assert!(no_mscnn.context.params < full.context.params);
    }
}
