//! Test-set metrics, single-thread latency, a persistence baseline and
//! machine-readable reports.
//!
//! Metrics are computed on standardized coordinates; raw-unit versions are
//! reported next to them.

mod ablation;
mod metrics;
mod report;
mod timing;

pub use ablation::{run_ablation, Experiment};
pub use metrics::{mae, mse, persistence_baseline, stack_inputs, stack_targets, to_raw_units};
pub use report::{
    evaluate, seed_metrics, write_predictions_csv, write_report_csv, Evaluation, MetricsReport, ReportContext, SeedMetrics,
    DEFAULT_LATENCY_THRESHOLD_MS, PREDICTIONS_CSV, REPORT_CSV, REPORT_JSON,
};
pub use timing::{time_inference, Timing, REPETITIONS, WARMUP_RUNS};
