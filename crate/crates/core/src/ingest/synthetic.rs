//! Learnable stand-in data: each variable is three superposed sinusoids plus
//! Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::UniformSeries;
use super::plt::TrajectoryPoint;
use super::PreparedDataset;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Points in the single generated series.
    pub length: usize,
    /// Seconds between points.
    pub interval: i64,
    /// Noise standard deviation relative to the clean signal's.
    pub noise: f64,
    pub seed: u64,
    /// Split segments shorter than this are discarded.
    pub min_window: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            length: 2177,
            interval: 30,
            noise: 0.01,
            seed: 7,
            min_window: 60,
        }
    }
}

impl SyntheticSpec {
    /// Series length giving `windows` stride-1 `m→n` windows over the three splits.
    pub fn length_for_windows(windows: usize, m: usize, n: usize) -> usize {
        windows + 3 * (m + n - 1)
    }
}

/// One user, one series, split 70/10/20 like real data.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<PreparedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets = [116.3, 39.9, 50.0];
    let scales = [0.01, 0.01, 10.0];
    let mut columns = Vec::new();
    for _ in 0..3 {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let period = rng.random_range(16.0..120.0);
                (rng.random_range(0.5..1.5), std::f64::consts::TAU / period, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let clean: Vec<f64> = (0..spec.length)
            .map(|t| waves.iter().map(|(a, w, p)| a * (w * t as f64 + p).sin()).sum())
            .collect();
        let mean = clean.iter().sum::<f64>() / clean.len().max(1) as f64;
        let sd = (clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / clean.len().max(1) as f64).sqrt();
        let noise = Normal::new(0.0, spec.noise * sd).expect("finite noise scale");
        columns.push(clean.into_iter().map(|v| v + noise.sample(&mut rng)).collect::<Vec<f64>>());
    }
    let t0 = 1_230_768_000; // 2009-01-01T00:00:00Z
    let points = (0..spec.length)
        .map(|t| TrajectoryPoint {
            timestamp: t0 + t as i64 * spec.interval,
            lon: offsets[0] + scales[0] * columns[0][t],
            lat: offsets[1] + scales[1] * columns[1][t],
            alt: offsets[2] + scales[2] * columns[2][t],
            alt_valid: true,
        })
        .collect();
    let series = vec![UniformSeries {
        user: "synthetic".into(),
        interval: spec.interval,
        points,
    }];
    PreparedDataset::from_series(spec.interval / 2, spec.interval, series, spec.min_window)
}
