use std::path::{Path, PathBuf};

use log::info;
use mmctp_core::evaluation::{
    seed_metrics, write_predictions_csv, write_report_csv, Experiment, MetricsReport, PREDICTIONS_CSV, REPORT_JSON,
};
use mmctp_core::ingest::{prepare, synthetic_dataset, Manifest, PreparedDataset, Split, MANIFEST_FILE};
use mmctp_core::model::{Model, Variant};
use mmctp_core::training::{train_seed, EpochRecord};
use serde::Serialize;

use crate::config::{ExperimentConfig, Source};
use crate::error::{io_err, CliError};

pub const RESOLVED_CONFIG: &str = "resolved.conf";
const RUN_CONFIG: &str = "run.conf";
const CHECKPOINT: &str = "model.ckpt";
const TRAIN_LOG: &str = "train.jsonl";
const RESUME: &str = "resume.bin";
const SUMMARY: &str = "summary.json";

/// Input-length and horizon sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    /// m ∈ {24, 48, 96, 192}, n = 12.
    Input,
    /// m = 48, n ∈ {3, 6, 12, 24, 48}.
    Horizon,
}

impl Grid {
    pub fn points(self) -> Vec<(usize, usize)> {
        match self {
            Grid::Input => [24, 48, 96, 192].map(|m| (m, 12)).to_vec(),
            Grid::Horizon => [3, 6, 12, 24, 48].map(|n| (48, n)).to_vec(),
        }
    }
}

/// Which runs a command covers.
pub struct Selection {
    pub variants: Vec<Variant>,
    pub shapes: Vec<(usize, usize)>,
}

impl Selection {
    pub fn runs(&self, cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, CliError> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for &(m, n) in &self.shapes {
                let run = cfg.with_run(v, m, n);
                run.validate().map_err(|e| CliError::Config(format!("variant {v}, m={m}, n={n}: {e}")))?;
                out.push(run);
            }
        }
        Ok(out)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn append_line(path: &Path, line: &str) -> mmctp_core::Result<()> {
    use std::io::Write;
    let io = |source| mmctp_core::Error::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(line.as_bytes()).map_err(io)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let m = &cfg.model;
    cfg.out_dir.join(m.variant.name()).join(format!("m{}-n{}", m.m, m.n))
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    run_dir(cfg).join(format!("seed-{seed}"))
}

pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join(CHECKPOINT)
}

/// Refuses to mix outputs of different settings in one run directory.
fn claim_run_dir(cfg: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let path = run_dir(cfg).join(RUN_CONFIG);
    let wanted = cfg.render_run();
    if path.exists() && !force && read(&path)? != wanted {
        return Err(CliError::Core(mmctp_core::Error::Mismatch(format!(
            "{} holds outputs of a different config; rerun with --force to replace them",
            run_dir(cfg).display()
        ))));
    }
    write(&path, &wanted)
}

pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    write(&dir.join(RESOLVED_CONFIG), &cfg.render())
}

fn load_manifest(cache: &Path) -> Result<Manifest, CliError> {
    let path = cache.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::Core(mmctp_core::Error::NoData(format!(
            "no prepared cache at {}; run `mmctp prepare` first",
            cache.display()
        ))));
    }
    Ok(serde_json::from_str(&read(&path)?)?)
}

/// Loads the cache and checks it was prepared for the configured interval.
fn load_dataset(cfg: &ExperimentConfig) -> Result<(PreparedDataset, Manifest), CliError> {
    let manifest = load_manifest(&cfg.cache_dir)?;
    if manifest.raw_interval != cfg.interval {
        return Err(CliError::Core(mmctp_core::Error::Mismatch(format!(
            "config interval is {} s but the cache at {} was prepared for {} s",
            cfg.interval,
            cfg.cache_dir.display(),
            manifest.raw_interval
        ))));
    }
    Ok(PreparedDataset::load(&cfg.cache_dir)?)
}

fn dataset_id(ds: &PreparedDataset, cfg: &ExperimentConfig) -> String {
    let source = match cfg.source {
        Source::Geolife => "geolife",
        Source::Synthetic => "synthetic",
    };
    format!("{source}-{}s-{}u", ds.raw_interval, ds.users().len())
}

fn counts_line(ds: &PreparedDataset, m: usize, n: usize) -> String {
    let w = |s| ds.window_count(s, m, n);
    format!(
        "users={} series={} points={} windows_train={} windows_val={} windows_test={}",
        ds.users().len(),
        ds.series.len(),
        ds.point_count(),
        w(Split::Train),
        w(Split::Val),
        w(Split::Test)
    )
}

pub fn cmd_prepare(cfg: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let manifest_path = cfg.cache_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        let (ds, _) = load_dataset(cfg)?;
        let sha = PreparedDataset::manifest_digest(&cfg.cache_dir)?;
        println!("cache up to date: {} manifest_sha256={sha}", counts_line(&ds, cfg.model.m, cfg.model.n));
        return Ok(());
    }
    let ds = match cfg.source {
        Source::Geolife => prepare(&cfg.raw_dir, &cfg.prepare_options())?,
        Source::Synthetic => synthetic_dataset(&cfg.synthetic_spec())?,
    };
    let sha = ds.save(&cfg.cache_dir)?;
    echo_config(cfg, &cfg.cache_dir)?;
    println!("{} manifest_sha256={sha}", counts_line(&ds, cfg.model.m, cfg.model.n));
    Ok(())
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    best_epoch: usize,
    best_val_loss: f64,
    epochs_run: usize,
    stopped_early: bool,
    checkpoint_sha256: String,
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    m: usize,
    n: usize,
    params: usize,
    seeds: Vec<SeedSummary>,
    mean_best_val_loss: f64,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(mmctp_core::sha256_hex(&bytes))
}

pub fn cmd_train(cfg: &ExperimentConfig, sel: &Selection, force: bool, resume: bool) -> Result<(), CliError> {
    let runs = sel.runs(cfg)?;
    let (ds, _) = load_dataset(cfg)?;
    let digest = ds.stats.digest();
    echo_config(cfg, &cfg.out_dir)?;
    for run in &runs {
        train_run(run, &ds, &digest, force, resume)?;
    }
    Ok(())
}

fn train_run(run: &ExperimentConfig, ds: &PreparedDataset, digest: &str, force: bool, resume: bool) -> Result<(), CliError> {
    claim_run_dir(run, force)?;
    let (m, n) = (run.model.m, run.model.n);
    let (train, val) = (ds.windows(Split::Train, m, n), ds.windows(Split::Val, m, n));
    let mut seeds = Vec::new();
    let mut params = 0;
    for &seed in &run.train.seeds {
        let dir = seed_dir(run, seed);
        let ckpt = dir.join(CHECKPOINT);
        let resume_path = dir.join(RESUME);
        if ckpt.exists() && !force {
            info!("{}: checkpoint exists, skipping", ckpt.display());
        } else {
            if !resume && resume_path.exists() {
                std::fs::remove_file(&resume_path).map_err(|e| io_err(&resume_path, e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let log_path = dir.join(TRAIN_LOG);
            if !resume_path.exists() {
                write(&log_path, "")?;
            }
            info!("training {} m={m} n={n} seed={seed}", run.model.variant);
            let out = train_seed(&run.model, &run.train, seed, train.clone(), val.clone(), digest, Some(&resume_path), |rec: &EpochRecord| {
                info!("  epoch {} train={:.6e} val={:.6e}", rec.epoch, rec.train_loss, rec.val_loss);
                append_line(&log_path, &rec.to_json_line())
            })?;
            out.best.save(&ckpt, digest)?;
            std::fs::remove_file(&resume_path).map_err(|e| io_err(&resume_path, e))?;
            let rendered: String = out.log.iter().map(EpochRecord::to_json_line).collect();
            write(&log_path, &rendered)?;
        }
        let model = Model::load_for(&ckpt, &run.model, Some(digest))?;
        params = model.param_count();
        let log = read(&dir.join(TRAIN_LOG))?;
        let records: Vec<EpochRecord> = log.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
        let best = records
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .ok_or_else(|| CliError::Input(format!("{} is empty", dir.join(TRAIN_LOG).display())))?;
        seeds.push(SeedSummary {
            seed,
            best_epoch: best.epoch,
            best_val_loss: best.val_loss,
            epochs_run: records.len(),
            stopped_early: records.len() < run.train.epochs,
            checkpoint_sha256: sha256_file(&ckpt)?,
        });
    }
    let summary = TrainSummary {
        variant: run.model.variant,
        m,
        n,
        params,
        mean_best_val_loss: seeds.iter().map(|s| s.best_val_loss).sum::<f64>() / seeds.len() as f64,
        seeds,
    };
    write(&run_dir(run).join(SUMMARY), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained variant={} m={m} n={n} seeds={} mean_best_val_loss={:e}",
        run.model.variant,
        summary.seeds.len(),
        summary.mean_best_val_loss
    );
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, sel: &Selection, split: Split, force: bool, csv_name: &str) -> Result<Vec<MetricsReport>, CliError> {
    let runs = sel.runs(cfg)?;
    let (ds, _) = load_dataset(cfg)?;
    let digest = ds.stats.digest();
    echo_config(cfg, &cfg.out_dir)?;
    let mut reports = Vec::new();
    for run in &runs {
        reports.push(eval_run(run, &ds, &digest, split, force)?);
    }
    write_report_csv(&cfg.out_dir.join(csv_name), &reports)?;
    Ok(reports)
}

fn eval_run(run: &ExperimentConfig, ds: &PreparedDataset, digest: &str, split: Split, force: bool) -> Result<MetricsReport, CliError> {
    let dir = run_dir(run);
    let json = dir.join(split_file(REPORT_JSON, split));
    claim_run_dir(run, false)?;
    if json.exists() && !force {
        info!("{}: report exists, reusing", json.display());
        return Ok(serde_json::from_str(&read(&json)?)?);
    }
    let (m, n) = (run.model.m, run.model.n);
    let windows = ds.windows(split, m, n);
    if windows.is_empty() {
        return Err(CliError::Core(mmctp_core::Error::EmptySplit(split.name())));
    }
    let exp = Experiment {
        latency_threshold_ms: run.latency_threshold_ms,
        ..Experiment::new(dataset_id(ds, run), run.model.clone(), run.train.clone())
    };
    let mut per_seed = Vec::new();
    let mut params = 0;
    for (k, &seed) in run.train.seeds.iter().enumerate() {
        let ckpt = checkpoint_path(run, seed);
        if !ckpt.exists() {
            return Err(CliError::Core(mmctp_core::Error::NoData(format!(
                "no checkpoint at {}; run `mmctp train` first",
                ckpt.display()
            ))));
        }
        let model = Model::load_for(&ckpt, &run.model, Some(digest))?;
        params = model.param_count();
        info!("evaluating {} on {} {} windows", ckpt.display(), windows.len(), split.name());
        let (metrics, eval) = seed_metrics(seed, &model, &windows, &ds.stats, None)?;
        if k == 0 {
            write_predictions_csv(&dir.join(split_file(PREDICTIONS_CSV, split)), &windows, &eval.predictions, &ds.stats)?;
        }
        per_seed.push(metrics);
    }
    let report = MetricsReport::new(exp.context(ds, params), per_seed, &windows)?;
    write(&json, &serde_json::to_string_pretty(&report)?)?;
    write_report_csv(&dir.join(split_file(mmctp_core::evaluation::REPORT_CSV, split)), std::slice::from_ref(&report))?;
    println!(
        "evaluated variant={} m={m} n={n} split={} mse={:e} mae={:e} baseline_mse={:e} t_inf_ms={:.4}",
        run.model.variant,
        split.name(),
        report.mse,
        report.mae,
        report.baseline_mse,
        report.t_inf_ms
    );
    Ok(report)
}

/// `report.json` for the test split, `val.report.json` for validation.
fn split_file(name: &str, split: Split) -> String {
    match split {
        Split::Test => name.to_string(),
        other => format!("{}.{name}", other.name()),
    }
}

pub fn cmd_ablate(cfg: &ExperimentConfig, sel: &Selection, force: bool) -> Result<(), CliError> {
    cmd_train(cfg, sel, force, false)?;
    let reports = cmd_eval(cfg, sel, Split::Test, force, "ablation.csv")?;
    println!("ablation rows={} csv={}", reports.len(), cfg.out_dir.join("ablation.csv").display());
    Ok(())
}
