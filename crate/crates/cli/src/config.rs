//! Flat `key = value` experiment configuration.
//!
//! Every key is optional and unknown keys are rejected. `#` starts a comment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmctp_core::ingest::{PrepareOptions, SyntheticSpec, MIN_USER_DAYS, RAW_INTERVALS};
use mmctp_core::model::{ModelConfig, Variant};
use mmctp_core::training::TrainConfig;
use mmctp_core::evaluation::DEFAULT_LATENCY_THRESHOLD_MS;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Geolife,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: Source,
    pub raw_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Raw logging interval in seconds.
    pub interval: i64,
    pub tolerance: i64,
    pub min_days: usize,
    pub min_window: usize,
    /// 0 keeps every user.
    pub max_users: usize,
    pub synthetic_length: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub latency_threshold_ms: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        Self {
            source: Source::Geolife,
            raw_dir: "data/geolife".into(),
            cache_dir: "data/cache".into(),
            out_dir: "runs".into(),
            interval: 15,
            tolerance: 1,
            min_days: MIN_USER_DAYS,
            min_window: 60,
            max_users: 0,
            synthetic_length: synth.length,
            synthetic_noise: synth.noise,
            synthetic_seed: synth.seed,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            latency_threshold_ms: DEFAULT_LATENCY_THRESHOLD_MS,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: expected {what}, got `{value}`"))
}

fn parse_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s, what))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(format!("line {}: duplicate key `{key}`", i + 1));
            }
            seen.push(key);
            cfg.set(key, value).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "source" => {
                self.source = match v {
                    "geolife" => Source::Geolife,
                    "synthetic" => Source::Synthetic,
                    _ => return Err(format!("source: expected geolife or synthetic, got `{v}`")),
                }
            }
            "raw_dir" => self.raw_dir = v.into(),
            "cache_dir" => self.cache_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "interval" => self.interval = parse(key, v, "seconds")?,
            "tolerance" => self.tolerance = parse(key, v, "seconds")?,
            "min_days" => self.min_days = parse(key, v, "an integer")?,
            "min_window" => self.min_window = parse(key, v, "an integer")?,
            "max_users" => self.max_users = parse(key, v, "an integer")?,
            "synthetic_length" => self.synthetic_length = parse(key, v, "an integer")?,
            "synthetic_noise" => self.synthetic_noise = parse(key, v, "a number")?,
            "synthetic_seed" => self.synthetic_seed = parse(key, v, "an integer")?,
            "m" => m.m = parse(key, v, "an integer")?,
            "n" => m.n = parse(key, v, "an integer")?,
            "prior" => m.prior = parse(key, v, "an integer")?,
            "d_model" => m.d_model = parse(key, v, "an integer")?,
            "hidden" => m.hidden = parse(key, v, "an integer")?,
            "mlp_blocks" => m.mlp_blocks = parse(key, v, "an integer")?,
            "conv_blocks" => m.conv_blocks = parse(key, v, "an integer")?,
            "kernels" => m.kernels = parse_list(key, v, "odd integers")?,
            "heads" => m.heads = parse(key, v, "an integer")?,
            "dropout" => m.dropout = parse(key, v, "a number")?,
            "variant" => m.variant = v.parse().map_err(|e| format!("variant: {e}"))?,
            "epochs" => t.epochs = parse(key, v, "an integer")?,
            "patience" => t.patience = parse(key, v, "an integer")?,
            "batch_size" => t.batch_size = parse(key, v, "an integer")?,
            "lr" => t.lr = parse(key, v, "a number")?,
            "lr_decay" => t.lr_decay = parse(key, v, "a number")?,
            "delta" => t.delta = parse(key, v, "a number")?,
            "seeds" => t.seeds = parse_list(key, v, "integers")?,
            "latency_threshold_ms" => self.latency_threshold_ms = parse(key, v, "a number")?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.source == Source::Geolife && !RAW_INTERVALS.contains(&self.interval) {
            return Err(format!("interval: must be one of {RAW_INTERVALS:?}, got {}", self.interval));
        }
        if self.latency_threshold_ms.is_nan() || self.latency_threshold_ms <= 0.0 {
            return Err("latency_threshold_ms: must be positive".into());
        }
        if self.synthetic_length == 0 {
            return Err("synthetic_length: must be at least 1".into());
        }
        let strip = |e: mmctp_core::Error| match e {
            mmctp_core::Error::Config(msg) => msg,
            other => other.to_string(),
        };
        self.model.validate().map_err(strip)?;
        self.train.validate().map_err(strip)
    }

    /// Model and training keys only: the settings a checkpoint depends on.
    pub fn render_run(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let lines = [
            ("m", m.m.to_string()),
            ("n", m.n.to_string()),
            ("prior", m.prior.to_string()),
            ("d_model", m.d_model.to_string()),
            ("hidden", m.hidden.to_string()),
            ("mlp_blocks", m.mlp_blocks.to_string()),
            ("conv_blocks", m.conv_blocks.to_string()),
            ("kernels", join(&m.kernels)),
            ("heads", m.heads.to_string()),
            ("dropout", m.dropout.to_string()),
            ("variant", m.variant.to_string()),
            ("epochs", t.epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("delta", t.delta.to_string()),
            ("seeds", join(&t.seeds)),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Every key with its resolved value; parsing this text gives back `self`.
    pub fn render(&self) -> String {
        let source = match self.source {
            Source::Geolife => "geolife",
            Source::Synthetic => "synthetic",
        };
        let lines = [
            ("source", source.to_string()),
            ("raw_dir", self.raw_dir.display().to_string()),
            ("cache_dir", self.cache_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("interval", self.interval.to_string()),
            ("tolerance", self.tolerance.to_string()),
            ("min_days", self.min_days.to_string()),
            ("min_window", self.min_window.to_string()),
            ("max_users", self.max_users.to_string()),
            ("synthetic_length", self.synthetic_length.to_string()),
            ("synthetic_noise", self.synthetic_noise.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("latency_threshold_ms", self.latency_threshold_ms.to_string()),
        ];
        let mut out: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        out.push_str(&self.render_run());
        out
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            raw_interval: self.interval,
            tolerance: self.tolerance,
            min_days: self.min_days,
            min_window: self.min_window,
            max_users: (self.max_users > 0).then_some(self.max_users),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            length: self.synthetic_length,
            interval: 2 * self.interval,
            noise: self.synthetic_noise,
            seed: self.synthetic_seed,
            min_window: self.min_window,
        }
    }

    /// Copy for one run of a sweep.
    pub fn with_run(&self, variant: Variant, m: usize, n: usize) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c.model.m = m;
        c.model.n = n;
        c
    }
}
