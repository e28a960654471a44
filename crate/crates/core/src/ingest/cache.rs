//! On-disk dataset cache: one binary blob per `(user, interval)` plus a JSON
//! manifest with the split lists and statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetStats, Splits, UniformSeries};
use super::plt::TrajectoryPoint;
use super::PreparedDataset;
use crate::codec::{read_file, sha256_hex, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CACHE_VERSION: u8 = 1;
const SERIES_MAGIC: &[u8; 8] = b"MMCTPSER";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserEntry {
    pub user: String,
    /// Blob path relative to the cache directory.
    pub file: String,
    pub sha256: String,
    /// Lengths of this user's series, in order.
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u8,
    pub raw_interval: i64,
    pub interval: i64,
    pub min_window: usize,
    pub stats: DatasetStats,
    pub stats_digest: String,
    pub users: Vec<UserEntry>,
    pub splits: Splits,
    pub points: usize,
}

fn encode_series(user: &str, interval: i64, series: &[&UniformSeries]) -> Vec<u8> {
    let mut w = Writer::header(SERIES_MAGIC, CACHE_VERSION);
    w.str(user);
    w.i64(interval);
    w.u64(series.len() as u64);
    for s in series {
        w.u64(s.len() as u64);
        for p in &s.points {
            w.i64(p.timestamp);
            w.f64(p.lon);
            w.f64(p.lat);
            w.f64(p.alt);
        }
    }
    w.buf
}

fn decode_series(bytes: &[u8], path: &Path) -> Result<Vec<UniformSeries>> {
    let mut r = Reader::open(bytes, path, SERIES_MAGIC, CACHE_VERSION)?;
    let user = r.str()?;
    let interval = r.i64()?;
    let count = r.u64()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u64()? as usize;
        let mut points = Vec::with_capacity(len.min(bytes.len() / 32));
        for _ in 0..len {
            points.push(TrajectoryPoint {
                timestamp: r.i64()?,
                lon: r.f64()?,
                lat: r.f64()?,
                alt: r.f64()?,
                alt_valid: true,
            });
        }
        out.push(UniformSeries {
            user: user.clone(),
            interval,
            points,
        });
    }
    r.finish()?;
    Ok(out)
}

impl PreparedDataset {
    /// Writes blobs and the manifest into `dir`; returns the manifest's SHA-256.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let mut users = Vec::new();
        for user in self.users() {
            let series: Vec<&UniformSeries> = self.series.iter().filter(|s| s.user == user).collect();
            let file = format!("series/{user}_{}s.bin", self.interval);
            let bytes = encode_series(user, self.interval, &series);
            write_file(&dir.join(&file), &bytes)?;
            users.push(UserEntry {
                user: user.to_string(),
                file,
                sha256: sha256_hex(&bytes),
                lengths: series.iter().map(|s| s.len()).collect(),
            });
        }
        let manifest = Manifest {
            version: CACHE_VERSION,
            raw_interval: self.raw_interval,
            interval: self.interval,
            min_window: self.min_window,
            stats: self.stats,
            stats_digest: self.stats.digest(),
            users,
            splits: self.splits.clone(),
            points: self.point_count(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Reads a cache written by [`PreparedDataset::save`], verifying blob digests.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&read_file(&path)?)?;
        if manifest.version != CACHE_VERSION {
            return Err(Error::Mismatch(format!("cache version {}, expected {CACHE_VERSION}", manifest.version)));
        }
        let mut series = Vec::new();
        for entry in &manifest.users {
            let blob = dir.join(&entry.file);
            let bytes = read_file(&blob)?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::Format {
                    path: blob,
                    detail: "digest does not match manifest".into(),
                });
            }
            let user_series = decode_series(&bytes, &blob)?;
            let lengths: Vec<usize> = user_series.iter().map(UniformSeries::len).collect();
            if lengths != entry.lengths || user_series.iter().any(|s| s.user != entry.user) {
                return Err(Error::Format {
                    path: blob,
                    detail: "contents do not match manifest".into(),
                });
            }
            series.extend(user_series);
        }
        let ds = Self {
            raw_interval: manifest.raw_interval,
            interval: manifest.interval,
            min_window: manifest.min_window,
            series,
            splits: manifest.splits.clone(),
            stats: manifest.stats,
        };
        Ok((ds, manifest))
    }

    /// SHA-256 of the manifest in `dir`.
    pub fn manifest_digest(dir: &Path) -> Result<String> {
        Ok(sha256_hex(&read_file(&dir.join(MANIFEST_FILE))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synthetic_dataset, SyntheticSpec};

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let ds = synthetic_dataset(&SyntheticSpec { length: 400, ..Default::default() }).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ha = ds.save(a.path()).unwrap();
        let hb = ds.save(b.path()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(PreparedDataset::manifest_digest(a.path()).unwrap(), ha);
        let (back, _) = PreparedDataset::load(a.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let ds = synthetic_dataset(&SyntheticSpec { length: 300, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let (_, manifest) = PreparedDataset::load(dir.path()).unwrap();
        let blob = dir.path().join(&manifest.users[0].file);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(PreparedDataset::load(dir.path()), Err(Error::Format { .. })));
        let truncated = decode_series(&bytes[..bytes.len() - 5], &blob);
        assert!(matches!(truncated, Err(Error::Format { .. })));
    }
}
