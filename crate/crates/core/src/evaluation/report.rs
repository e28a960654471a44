use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{mae, mse, persistence_baseline, stack_inputs, stack_targets, to_raw_units};
use super::timing::{time_inference, Timing};
use crate::codec::write_file;
use crate::error::{Error, Result};
use crate::ingest::{DatasetStats, WindowSample, VARIABLES};
use crate::model::{Model, Variant};
use crate::numerics::Tensor;
use crate::training::predict_windows;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";

/// Default acceptable per-sample latency φ, in milliseconds.
pub const DEFAULT_LATENCY_THRESHOLD_MS: f64 = 5.0;

/// Test-set results of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// Normalized-space metrics.
    pub mse: f64,
    pub mae: f64,
    /// Metrics after undoing standardization (degrees, degrees, meters).
    pub raw_mse: f64,
    pub raw_mae: f64,
    pub t_inf_ms: f64,
    pub t_inf_median_ms: f64,
    pub best_epoch: Option<usize>,
}

/// Predictions and scores of a model on a window set.
pub struct Evaluation {
    /// Standardized `s×n×3` predictions.
    pub predictions: Tensor,
    pub mse: f64,
    pub mae: f64,
    pub raw_mse: f64,
    pub raw_mae: f64,
}

pub fn evaluate(model: &Model, windows: &[WindowSample], stats: &DatasetStats) -> Result<Evaluation> {
    let predictions = predict_windows(model, windows)?;
    let truth = stack_targets(windows)?;
    let (raw_pred, raw_truth) = (to_raw_units(&predictions, stats)?, to_raw_units(&truth, stats)?);
    Ok(Evaluation {
        mse: mse(&predictions, &truth)?,
        mae: mae(&predictions, &truth)?,
        raw_mse: mse(&raw_pred, &raw_truth)?,
        raw_mae: mae(&raw_pred, &raw_truth)?,
        predictions,
    })
}

/// Scores and times one model.
pub fn seed_metrics(seed: u64, model: &Model, windows: &[WindowSample], stats: &DatasetStats, best_epoch: Option<usize>) -> Result<(SeedMetrics, Evaluation)> {
    let eval = evaluate(model, windows, stats)?;
    let Timing { mean_ms, median_ms, .. } = time_inference(model, windows)?;
    let metrics = SeedMetrics {
        seed,
        mse: eval.mse,
        mae: eval.mae,
        raw_mse: eval.raw_mse,
        raw_mae: eval.raw_mae,
        t_inf_ms: mean_ms,
        t_inf_median_ms: median_ms,
        best_epoch,
    };
    Ok((metrics, eval))
}

/// Where a report's numbers came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub dataset: String,
    pub raw_interval: i64,
    pub interval: i64,
    pub m: usize,
    pub n: usize,
    pub variant: Variant,
    pub params: usize,
    pub latency_threshold_ms: f64,
}

/// Seed-averaged test metrics of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub context: ReportContext,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub raw_mse: f64,
    pub raw_mae: f64,
    pub t_inf_ms: f64,
    pub t_inf_median_ms: f64,
    pub within_latency_threshold: bool,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    sum / count as f64
}

impl MetricsReport {
    pub fn new(context: ReportContext, per_seed: Vec<SeedMetrics>, windows: &[WindowSample]) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::invalid("MetricsReport", "no seeds"));
        }
        let truth = stack_targets(windows)?;
        let baseline = persistence_baseline(&stack_inputs(windows)?, truth.shape()[1])?;
        let avg = |f: fn(&SeedMetrics) -> f64| mean(per_seed.iter().map(f));
        let t_inf_ms = avg(|s| s.t_inf_ms);
        Ok(Self {
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            samples: windows.len(),
            mse: avg(|s| s.mse),
            mae: avg(|s| s.mae),
            raw_mse: avg(|s| s.raw_mse),
            raw_mae: avg(|s| s.raw_mae),
            t_inf_ms,
            t_inf_median_ms: avg(|s| s.t_inf_median_ms),
            within_latency_threshold: t_inf_ms <= context.latency_threshold_ms,
            baseline_mse: mse(&baseline, &truth)?,
            baseline_mae: mae(&baseline, &truth)?,
            context,
            per_seed,
        })
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.t_inf_ms = 0.0;
        r.t_inf_median_ms = 0.0;
        r.within_latency_threshold = false;
        for s in &mut r.per_seed {
            s.t_inf_ms = 0.0;
            s.t_inf_median_ms = 0.0;
        }
        r
    }

    pub const CSV_HEADER: &'static str = "dataset,variant,raw_interval,interval,m,n,params,seeds,samples,mse,mae,raw_mse,raw_mae,t_inf_ms,t_inf_median_ms,baseline_mse,baseline_mae";

    pub fn csv_row(&self) -> String {
        let c = &self.context;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{},{}",
            c.dataset,
            c.variant,
            c.raw_interval,
            c.interval,
            c.m,
            c.n,
            c.params,
            seeds.join(";"),
            self.samples,
            self.mse,
            self.mae,
            self.raw_mse,
            self.raw_mae,
            self.t_inf_ms,
            self.t_inf_median_ms,
            self.baseline_mse,
            self.baseline_mae,
        )
    }

    /// Writes `report.json` and a one-row `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(REPORT_JSON), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_report_csv(&dir.join(REPORT_CSV), std::slice::from_ref(self))
    }
}

/// One row per report under a shared header.
pub fn write_report_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Per-step true and predicted fixes in raw units, for plotting.
pub fn write_predictions_csv(path: &Path, windows: &[WindowSample], predictions: &Tensor, stats: &DatasetStats) -> Result<()> {
    let truth = to_raw_units(&stack_targets(windows)?, stats)?;
    let pred = to_raw_units(predictions, stats)?;
    if pred.shape() != truth.shape() {
        return Err(Error::shape("write_predictions_csv", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let mut out = String::from("sample,timestamp,true_lon,true_lat,true_alt,pred_lon,pred_lat,pred_alt\n");
    let mut rows = truth.data().chunks_exact(VARIABLES).zip(pred.data().chunks_exact(VARIABLES));
    for (i, w) in windows.iter().enumerate() {
        for ts in w.target_timestamps() {
            let (t, p) = rows.next().expect("row count checked above");
            let _ = writeln!(out, "{i},{ts},{},{},{},{},{},{}", t[0], t[1], t[2], p[0], p[1], p[2]);
        }
    }
    write_file(path, out.as_bytes())
}
