use chrono::{DateTime, Datelike, Timelike};

/// Number of calendar features per timestamp.
pub const TIME_FEATURES: usize = 6;

/// Second-of-minute, minute-of-hour, hour-of-day, day-of-week (Monday = 0),
/// day-of-month and day-of-year, each scaled into `[-0.5, 0.5]`.
pub fn time_features(timestamp: i64) -> [f64; TIME_FEATURES] {
    let dt = DateTime::from_timestamp(timestamp, 0).unwrap_or_default();
    [
        dt.second() as f64 / 59.0 - 0.5,
        dt.minute() as f64 / 59.0 - 0.5,
        dt.hour() as f64 / 23.0 - 0.5,
        dt.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
        (dt.day() - 1) as f64 / 30.0 - 0.5,
        (dt.ordinal() - 1) as f64 / 365.0 - 0.5,
    ]
}

/// The `n` grid timestamps following `last`.
pub fn future_timestamps(last: i64, interval: i64, n: usize) -> Vec<i64> {
    (1..=n as i64).map(|k| last + k * interval).collect()
}

/// Row-major `len×6` feature block for `start, start+Δ, …`.
pub fn feature_rows(start: i64, interval: i64, len: usize) -> Vec<f64> {
    (0..len as i64)
        .flat_map(|k| time_features(start + k * interval))
        .collect()
}
