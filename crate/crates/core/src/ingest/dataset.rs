use std::collections::{BTreeMap, BTreeSet};

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use super::plt::TrajectoryPoint;
use super::time::{feature_rows, future_timestamps};
use crate::error::{Error, Result};

/// Variables per fix: longitude, latitude, altitude.
pub const VARIABLES: usize = 3;
/// A sub-trajectory must have strictly more points than this.
pub const MIN_SERIES_POINTS: usize = 200;
/// Users need sub-trajectories on at least this many distinct dates.
pub const MIN_USER_DAYS: usize = 25;

/// An evenly spaced sub-trajectory of one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformSeries {
    pub user: String,
    /// Seconds between consecutive points.
    pub interval: i64,
    pub points: Vec<TrajectoryPoint>,
}

impl UniformSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> i64 {
        self.points.first().map_or(0, |p| p.timestamp)
    }

    /// UTC calendar date of the first point, `YYYY-MM-DD`.
    pub fn date(&self) -> String {
        DateTime::from_timestamp(self.start(), 0)
            .unwrap_or_default()
            .format("%Y-%m-%d")
            .to_string()
    }
}

/// Keeps series longer than [`MIN_SERIES_POINTS`] and then drops users whose
/// kept series fall on fewer than `min_days` distinct dates. Output is ordered
/// by user, then start time.
pub fn segment_and_filter(series: Vec<UniformSeries>, min_days: usize) -> Vec<UniformSeries> {
    let mut by_user: BTreeMap<String, Vec<UniformSeries>> = BTreeMap::new();
    for s in series.into_iter().filter(|s| s.len() > MIN_SERIES_POINTS) {
        by_user.entry(s.user.clone()).or_default().push(s);
    }
    let mut out = Vec::new();
    for (user, mut list) in by_user {
        let days: BTreeSet<String> = list.iter().map(UniformSeries::date).collect();
        if days.len() < min_days {
            log::info!("dropping user {user}: {} distinct dates", days.len());
            continue;
        }
        list.sort_by_key(UniformSeries::start);
        out.extend(list);
    }
    out
}

/// A contiguous slice `start..start+len` of series `series`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub series: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Segment] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Point counts of a chronological 70/10/20 split: the boundaries sit at
/// `⌊0.7·len⌋` and `⌊0.8·len⌋`.
pub fn split_counts(len: usize) -> (usize, usize, usize) {
    let train = len * 7 / 10;
    let val_end = len * 8 / 10;
    (train, val_end - train, len - val_end)
}

/// Splits each user's points chronologically into train/val/test segments.
/// Series must be grouped by user and ordered by time (as returned by
/// [`segment_and_filter`]). Segments shorter than `min_window` are discarded.
pub fn split_per_user(series: &[UniformSeries], min_window: usize) -> Splits {
    let mut splits = Splits::default();
    let mut i = 0;
    while i < series.len() {
        let user = &series[i].user;
        let j = i + series[i..].iter().take_while(|s| &s.user == user).count();
        let total: usize = series[i..j].iter().map(UniformSeries::len).sum();
        let (train, val, _) = split_counts(total);
        let bounds = [(0, train, Split::Train), (train, train + val, Split::Val), (train + val, total, Split::Test)];

        let mut offset = 0;
        for (k, s) in series[i..j].iter().enumerate() {
            let (lo, hi) = (offset, offset + s.len());
            for &(b0, b1, split) in &bounds {
                let (a, b) = (lo.max(b0), hi.min(b1));
                if b > a && b - a >= min_window.max(1) {
                    let seg = Segment {
                        series: i + k,
                        start: a - lo,
                        len: b - a,
                    };
                    match split {
                        Split::Train => splits.train.push(seg),
                        Split::Val => splits.val.push(seg),
                        Split::Test => splits.test.push(seg),
                    }
                }
            }
            offset = hi;
        }
        for (split, segs) in [(Split::Train, &splits.train), (Split::Val, &splits.val), (Split::Test, &splits.test)] {
            if !segs.iter().any(|s| (i..j).contains(&s.series)) {
                log::warn!("user {user}: no {} windows", split.name());
            }
        }
        i = j;
    }
    splits
}

/// Per-variable mean and (population) standard deviation of the training points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: [f64; VARIABLES],
    pub std: [f64; VARIABLES],
}

impl DatasetStats {
    pub fn from_values<'a>(values: impl Iterator<Item = &'a [f64; VARIABLES]> + Clone) -> Result<Self> {
        let count = values.clone().count();
        if count == 0 {
            return Err(Error::EmptySplit("train"));
        }
        let mut mean = [0.0; VARIABLES];
        for v in values.clone() {
            (0..VARIABLES).for_each(|k| mean[k] += v[k]);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = [0.0; VARIABLES];
        for v in values {
            (0..VARIABLES).for_each(|k| var[k] += (v[k] - mean[k]).powi(2));
        }
        let mut std = [0.0; VARIABLES];
        for k in 0..VARIABLES {
            std[k] = (var[k] / count as f64).sqrt();
            if std[k].is_nan() || std[k] <= 0.0 {
                return Err(Error::ZeroVariance { index: k });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, v: [f64; VARIABLES]) -> [f64; VARIABLES] {
        std::array::from_fn(|k| (v[k] - self.mean[k]) / self.std[k])
    }

    pub fn invert(&self, v: [f64; VARIABLES]) -> [f64; VARIABLES] {
        std::array::from_fn(|k| v[k] * self.std[k] + self.mean[k])
    }

    /// SHA-256 over the exact bit patterns, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Statistics over every training segment.
pub fn compute_stats(series: &[UniformSeries], train: &[Segment]) -> Result<DatasetStats> {
    let values: Vec<[f64; VARIABLES]> = train
        .iter()
        .flat_map(|seg| series[seg.series].points[seg.start..seg.start + seg.len].iter().map(TrajectoryPoint::values))
        .collect();
    DatasetStats::from_values(values.iter())
}

/// One supervised example. Value blocks are standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `m×3`
    pub input: Vec<f64>,
    /// `n×3`
    pub target: Vec<f64>,
    /// `m×6`
    pub input_time: Vec<f64>,
    /// `n×6`
    pub target_time: Vec<f64>,
    /// Timestamp of the first input step.
    pub start: i64,
    pub interval: i64,
}

impl WindowSample {
    pub fn input_steps(&self) -> usize {
        self.input.len() / VARIABLES
    }

    pub fn target_steps(&self) -> usize {
        self.target.len() / VARIABLES
    }

    /// Timestamps of all input and target steps.
    pub fn timestamps(&self) -> Vec<i64> {
        let total = self.input_steps() + self.target_steps();
        (0..total as i64).map(|k| self.start + k * self.interval).collect()
    }

    pub fn target_timestamps(&self) -> Vec<i64> {
        let last = self.start + (self.input_steps() as i64 - 1) * self.interval;
        future_timestamps(last, self.interval, self.target_steps())
    }
}

/// Number of stride-1 windows of `m + n` steps in `len` points.
pub fn window_count(len: usize, m: usize, n: usize) -> usize {
    (len + 1).saturating_sub(m + n)
}

/// All stride-1 windows of a point slice, standardized with `stats`.
pub fn make_windows(points: &[TrajectoryPoint], interval: i64, m: usize, n: usize, stats: &DatasetStats) -> Vec<WindowSample> {
    let std_values: Vec<[f64; VARIABLES]> = points.iter().map(|p| stats.standardize(p.values())).collect();
    (0..window_count(points.len(), m, n))
        .map(|s| {
            let start = points[s].timestamp;
            let last_input = points[s + m - 1].timestamp;
            WindowSample {
                input: std_values[s..s + m].iter().flatten().copied().collect(),
                target: std_values[s + m..s + m + n].iter().flatten().copied().collect(),
                input_time: feature_rows(start, interval, m),
                target_time: future_timestamps(last_input, interval, n)
                    .into_iter()
                    .flat_map(super::time::time_features)
                    .collect(),
                start,
                interval,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(user: &str, day: i64, len: usize) -> UniformSeries {
        let t0 = 1_230_768_000 + day * 86_400; // 2009-01-01 + day
        UniformSeries {
            user: user.into(),
            interval: 30,
            points: (0..len)
                .map(|k| TrajectoryPoint {
                    timestamp: t0 + 30 * k as i64,
                    lon: k as f64,
                    lat: 2.0 * k as f64,
                    alt: (k % 7) as f64,
                    alt_valid: true,
                })
                .collect(),
        }
    }

    #[test]
    fn length_boundary_is_strict() {
        let kept = segment_and_filter(vec![series("u", 0, 200), series("u", 1, 201)], 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].len(), 201);
    }

    #[test]
    fn user_day_filter() {
        let few: Vec<_> = (0..24).map(|d| series("a", d, 201)).collect();
        let enough: Vec<_> = (0..25).map(|d| series("b", d, 201)).collect();
        let kept = segment_and_filter(few.into_iter().chain(enough).collect(), MIN_USER_DAYS);
        assert_eq!(kept.len(), 25);
        assert!(kept.iter().all(|s| s.user == "b"));
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(1000), (700, 100, 200));
        assert_eq!(split_counts(999), (699, 100, 200));
    }

    #[test]
    fn split_crosses_series_boundaries_chronologically() {
        let s = vec![series("u", 0, 600), series("u", 1, 400)];
        let splits = split_per_user(&s, 1);
        assert_eq!(splits.train, vec![Segment { series: 0, start: 0, len: 600 }, Segment { series: 1, start: 0, len: 100 }]);
        assert_eq!(splits.val, vec![Segment { series: 1, start: 100, len: 100 }]);
        assert_eq!(splits.test, vec![Segment { series: 1, start: 200, len: 200 }]);
    }

    #[test]
    fn short_validation_share_is_empty() {
        let s = vec![series("u", 0, 300)];
        let splits = split_per_user(&s, 60);
        assert_eq!(splits.train.len(), 1);
        assert!(splits.val.is_empty());
        assert_eq!(splits.test[0].len, 60);
    }

    #[test]
    fn window_counts() {
        // 201 − 60 + 1
        assert_eq!(window_count(201, 48, 12), 142);
        assert_eq!(window_count(60, 48, 12), 1);
        assert_eq!(window_count(59, 48, 12), 0);
        let s = series("u", 0, 201);
        let stats = compute_stats(std::slice::from_ref(&s), &[Segment { series: 0, start: 0, len: 201 }]).unwrap();
        assert_eq!(make_windows(&s.points, 30, 48, 12, &stats).len(), 142);
        assert!(make_windows(&s.points[..59], 30, 48, 12, &stats).is_empty());
    }

    #[test]
    fn stats_and_round_trip() {
        let vals = [[0.0, 0.0, 5.0], [2.0, 4.0, 7.0]];
        let st = DatasetStats::from_values(vals.iter()).unwrap();
        assert_eq!(st.mean, [1.0, 2.0, 6.0]);
        assert_eq!(st.std, [1.0, 2.0, 1.0]);
        assert_eq!(st.standardize(vals[0]), [-1.0, -1.0, -1.0]);
        let p = [116.3, 39.9, 51.2];
        let back = st.invert(st.standardize(p));
        assert!((0..3).all(|k| (back[k] - p[k]).abs() < 1e-12));
    }

    #[test]
    fn constant_variable_is_rejected() {
        let vals = [[1.0, 0.0, 5.0], [1.0, 4.0, 7.0]];
        assert!(matches!(DatasetStats::from_values(vals.iter()), Err(Error::ZeroVariance { index: 0 })));
    }

    #[test]
    fn window_timestamps_form_one_progression() {
        let s = series("u", 3, 80);
        let stats = compute_stats(std::slice::from_ref(&s), &[Segment { series: 0, start: 0, len: 80 }]).unwrap();
        for w in make_windows(&s.points, 30, 8, 4, &stats) {
            let ts = w.timestamps();
            assert!(ts.windows(2).all(|p| p[1] - p[0] == 30));
            assert!(w.input_time.iter().chain(&w.target_time).all(|v| (-0.5..=0.5).contains(v)));
        }
    }
}
