//! Forecasting from a CSV of recent fixes.

use std::path::Path;

use chrono::DateTime;
use mmctp_core::ingest::{feature_rows, future_timestamps, time_features, DatasetStats, WindowSample, MANIFEST_FILE, VARIABLES};
use mmctp_core::model::{Batch, Model};

use crate::commands::checkpoint_path;
use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError};

/// One GPS fix: unix seconds, longitude, latitude, altitude (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fix {
    pub timestamp: i64,
    pub values: [f64; VARIABLES],
}

fn parse_time(s: &str) -> Option<i64> {
    s.parse::<i64>()
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.timestamp()))
}

/// Reads `timestamp,lon,lat,alt` rows. A header line is allowed.
/// Timestamps are unix seconds or RFC 3339.
pub fn read_fixes(text: &str) -> Result<Vec<Fix>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || CliError::Input(format!("line {}: expected timestamp,lon,lat,alt, got `{line}`", i + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let Some(timestamp) = parse_time(cols[0]) else {
            if i == 0 {
                continue;
            }
            return Err(bad());
        };
        let mut values = [0.0; VARIABLES];
        for (v, c) in values.iter_mut().zip(&cols[1..]) {
            *v = c.parse().map_err(|_| bad())?;
        }
        out.push(Fix { timestamp, values });
    }
    Ok(out)
}

/// Builds the model input from exactly `m` evenly spaced fixes.
pub fn window_from_fixes(fixes: &[Fix], m: usize, n: usize, interval: i64, stats: &DatasetStats) -> Result<WindowSample, CliError> {
    if fixes.len() != m {
        return Err(CliError::Input(format!("expected {m} fixes, got {}", fixes.len())));
    }
    if let Some(w) = fixes.windows(2).find(|w| w[1].timestamp - w[0].timestamp != interval) {
        return Err(CliError::Input(format!(
            "fixes must be spaced {interval} s apart; found {} s at timestamp {}",
            w[1].timestamp - w[0].timestamp,
            w[1].timestamp
        )));
    }
    let start = fixes[0].timestamp;
    let last = fixes[m - 1].timestamp;
    Ok(WindowSample {
        input: fixes.iter().flat_map(|f| stats.standardize(f.values)).collect(),
        target: vec![0.0; n * VARIABLES],
        input_time: feature_rows(start, interval, m),
        target_time: future_timestamps(last, interval, n).into_iter().flat_map(time_features).collect(),
        start,
        interval,
    })
}

pub fn cmd_predict(cfg: &ExperimentConfig, seed: u64, input: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let manifest_path = cfg.cache_dir.join(MANIFEST_FILE);
    let manifest: mmctp_core::ingest::Manifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?)?;
    let ckpt = checkpoint_path(cfg, seed);
    if !ckpt.exists() {
        return Err(CliError::Core(mmctp_core::Error::NoData(format!(
            "no checkpoint at {}; run `mmctp train` first",
            ckpt.display()
        ))));
    }
    let model = Model::load_for(&ckpt, &cfg.model, Some(&manifest.stats_digest))?;
    let text = std::fs::read_to_string(input).map_err(|e| io_err(input, e))?;
    let fixes = read_fixes(&text)?;
    let (m, n) = (cfg.model.m, cfg.model.n);
    let window = window_from_fixes(&fixes, m, n, manifest.interval, &manifest.stats)?;
    let pred = model.predict(&Batch::from_windows(&[&window])?)?;
    let mut out = String::from("timestamp,lon,lat,alt\n");
    for (ts, row) in window.target_timestamps().into_iter().zip(pred.data().chunks_exact(VARIABLES)) {
        let v = manifest.stats.invert([row[0], row[1], row[2]]);
        out.push_str(&format!("{ts},{},{},{}\n", v[0], v[1], v[2]));
    }
    match output {
        Some(path) => std::fs::write(path, out).map_err(|e| io_err(path, e)),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rfc3339_are_accepted() {
        let fixes = read_fixes("timestamp,lon,lat,alt\n2009-01-01T00:00:00Z,116.3,39.9,50\n1230768030,116.4,39.8,51\n").unwrap();
        assert_eq!(fixes.len(), 2);
        assert_eq!(fixes[0].timestamp, 1_230_768_000);
        assert_eq!(fixes[1].values, [116.4, 39.8, 51.0]);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(read_fixes("1,2,3\n").is_err());
        assert!(read_fixes("0,1,2,3\nx,1,2,3\n").is_err());
        assert!(read_fixes("0,1,2,abc\n").is_err());
    }

    #[test]
    fn uneven_spacing_is_rejected() {
        let stats = DatasetStats { mean: [0.0; 3], std: [1.0; 3] };
        let fixes: Vec<Fix> = [0, 30, 61].iter().map(|&t| Fix { timestamp: t, values: [0.0; 3] }).collect();
        assert!(window_from_fixes(&fixes, 3, 2, 30, &stats).is_err());
        assert!(window_from_fixes(&fixes[..2], 3, 2, 30, &stats).is_err());
        let w = window_from_fixes(&fixes[..2], 2, 2, 30, &stats).unwrap();
        assert_eq!(w.target_timestamps(), vec![60, 90]);
    }
}
