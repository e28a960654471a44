//! Raw GPS logs to standardized, time-featured forecasting windows.

mod cache;
mod dataset;
mod pipeline;
mod plt;
mod resample;
mod synthetic;
mod time;

pub use cache::{Manifest, UserEntry, CACHE_VERSION, MANIFEST_FILE};
pub use dataset::{
    compute_stats, make_windows, segment_and_filter, split_counts, split_per_user, window_count, DatasetStats, Segment, Split,
    Splits, UniformSeries, WindowSample, MIN_SERIES_POINTS, MIN_USER_DAYS, VARIABLES,
};
pub use pipeline::{build_series, prepare, PrepareOptions, RAW_INTERVALS};
pub use plt::{parse_plt, ParsedPlt, TrajectoryPoint, INVALID_ALTITUDE_FEET};
pub use resample::{resample_linear, select_by_interval};
pub use synthetic::{synthetic_dataset, SyntheticSpec};
pub use time::{feature_rows, future_timestamps, time_features, TIME_FEATURES};

use crate::error::Result;

/// Filtered series with their chronological split and training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    /// Raw logging interval the runs were selected at (seconds).
    pub raw_interval: i64,
    /// Spacing of the resampled series (seconds).
    pub interval: i64,
    /// Segments shorter than this were discarded when splitting.
    pub min_window: usize,
    pub series: Vec<UniformSeries>,
    pub splits: Splits,
    pub stats: DatasetStats,
}

impl PreparedDataset {
    /// Splits the series and computes statistics on the training share.
    pub fn from_series(raw_interval: i64, interval: i64, series: Vec<UniformSeries>, min_window: usize) -> Result<Self> {
        let splits = split_per_user(&series, min_window);
        let stats = compute_stats(&series, &splits.train)?;
        Ok(Self {
            raw_interval,
            interval,
            min_window,
            series,
            splits,
            stats,
        })
    }

    pub fn users(&self) -> Vec<&str> {
        let mut users: Vec<&str> = self.series.iter().map(|s| s.user.as_str()).collect();
        users.dedup();
        users
    }

    pub fn point_count(&self) -> usize {
        self.series.iter().map(UniformSeries::len).sum()
    }

    /// Number of `m→n` windows a split yields.
    pub fn window_count(&self, split: Split, m: usize, n: usize) -> usize {
        self.splits.get(split).iter().map(|s| window_count(s.len, m, n)).sum()
    }

    /// Every stride-1 window of a split, in segment order.
    pub fn windows(&self, split: Split, m: usize, n: usize) -> Vec<WindowSample> {
        self.splits
            .get(split)
            .iter()
            .flat_map(|seg| {
                let points = &self.series[seg.series].points[seg.start..seg.start + seg.len];
                make_windows(points, self.interval, m, n, &self.stats)
            })
            .collect()
    }

    /// Keeps only the first `k` users (in sorted order) and re-splits.
    pub fn restrict_users(self, k: usize) -> Result<Self> {
        let keep: Vec<String> = self.users().into_iter().take(k).map(String::from).collect();
        let series = self.series.into_iter().filter(|s| keep.contains(&s.user)).collect();
        Self::from_series(self.raw_interval, self.interval, series, self.min_window)
    }
}
