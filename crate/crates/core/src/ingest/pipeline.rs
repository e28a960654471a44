use std::path::{Path, PathBuf};

use super::dataset::{segment_and_filter, UniformSeries, MIN_USER_DAYS};
use super::plt::parse_plt;
use super::resample::{resample_linear, select_by_interval};
use super::PreparedDataset;
use crate::error::{Error, Result};
use crate::numerics::par;

/// Raw logging intervals the pipeline accepts, in seconds.
pub const RAW_INTERVALS: [i64; 3] = [5, 10, 15];

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    /// One of [`RAW_INTERVALS`]; series are resampled at twice this.
    pub raw_interval: i64,
    /// Allowed jitter on raw gaps, seconds.
    pub tolerance: i64,
    pub min_days: usize,
    /// Shortest split segment kept, normally `m + n`.
    pub min_window: usize,
    pub max_users: Option<usize>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            raw_interval: 15,
            tolerance: 1,
            min_days: MIN_USER_DAYS,
            min_window: 60,
            max_users: None,
        }
    }
}

impl PrepareOptions {
    pub fn resampled_interval(&self) -> i64 {
        2 * self.raw_interval
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// `(user, file)` pairs under `Data/<user>/Trajectory/*.plt`, sorted.
fn plt_files(raw_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let data = raw_dir.join("Data");
    let root = if data.is_dir() { data } else { raw_dir.to_path_buf() };
    let mut files = Vec::new();
    for user_dir in list_dir(&root)?.into_iter().filter(|p| p.is_dir()) {
        let traj = user_dir.join("Trajectory");
        if !traj.is_dir() {
            continue;
        }
        let user = user_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for f in list_dir(&traj)? {
            if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("plt")) {
                files.push((user.clone(), f));
            }
        }
    }
    Ok(files)
}

/// Parses every PLT file (in parallel) and returns the resampled runs,
/// ordered by user, file name and time.
pub fn build_series(raw_dir: &Path, opts: &PrepareOptions) -> Result<Vec<UniformSeries>> {
    if !RAW_INTERVALS.contains(&opts.raw_interval) {
        return Err(Error::Config(format!("interval must be one of {RAW_INTERVALS:?}, got {}", opts.raw_interval)));
    }
    if !raw_dir.is_dir() {
        return Err(Error::NoData(format!("{} is not a directory", raw_dir.display())));
    }
    let files = plt_files(raw_dir)?;
    if files.is_empty() {
        return Err(Error::NoData(format!("no .plt files under {}", raw_dir.display())));
    }
    let interval = opts.resampled_interval();
    let per_file: Vec<Result<Vec<UniformSeries>>> = par::map_range(files.len(), |i| {
        let (user, path) = &files[i];
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let parsed = parse_plt(&bytes);
        if parsed.malformed + parsed.out_of_order > 0 {
            log::warn!(
                "{}: skipped {} malformed and {} out-of-order records",
                path.display(),
                parsed.malformed,
                parsed.out_of_order
            );
        }
        Ok(select_by_interval(&parsed.points, opts.raw_interval, opts.tolerance)
            .iter()
            .map(|run| UniformSeries {
                user: user.clone(),
                interval,
                points: resample_linear(run, interval),
            })
            .filter(|s| !s.is_empty())
            .collect())
    });
    let mut out = Vec::new();
    for r in per_file {
        out.extend(r?);
    }
    Ok(out)
}

/// Full pipeline: parse, resample, filter, split and compute statistics.
pub fn prepare(raw_dir: &Path, opts: &PrepareOptions) -> Result<PreparedDataset> {
    let series = segment_and_filter(build_series(raw_dir, opts)?, opts.min_days);
    if series.is_empty() {
        return Err(Error::NoData("no user passed the length and day filters".into()));
    }
    let ds = PreparedDataset::from_series(opts.raw_interval, opts.resampled_interval(), series, opts.min_window)?;
    match opts.max_users {
        Some(k) => ds.restrict_users(k),
        None => Ok(ds),
    }
}
