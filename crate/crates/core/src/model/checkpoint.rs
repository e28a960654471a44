//! Versioned binary checkpoint: configuration, parameters in declaration
//! order, running batch-norm statistics and the dataset statistics digest.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 8] = b"MMCTPCKP";

impl Model {
    /// Serialized checkpoint bytes.
    pub fn to_bytes(&self, stats_digest: &str) -> Result<Vec<u8>> {
        let mut w = Writer::header(MAGIC, CHECKPOINT_VERSION);
        let cfg = serde_json::to_string(self.config())?;
        w.str(&cfg);
        w.str(&self.config().digest());
        w.str(stats_digest);
        w.u64(self.params.len() as u64);
        for (_, p) in self.params.iter() {
            w.str(&p.name);
            w.u64(p.tensor.rank() as u64);
            p.tensor.shape().iter().for_each(|d| w.u64(*d as u64));
            w.f64s(p.tensor.data());
        }
        w.u64(self.net.running.len() as u64);
        for r in &self.net.running {
            w.u64(r.initialized as u64);
            w.f64s(&r.mean);
            w.f64s(&r.var);
        }
        Ok(w.buf)
    }

    pub fn save(&self, path: &Path, stats_digest: &str) -> Result<()> {
        write_file(path, &self.to_bytes(stats_digest)?)
    }

    /// Parses a checkpoint; returns the model and its dataset statistics digest.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, String)> {
        let mut r = Reader::open(bytes, path, MAGIC, CHECKPOINT_VERSION)?;
        let cfg_text = r.str()?;
        let config: ModelConfig = serde_json::from_str(&cfg_text).map_err(|e| r.err(format!("config: {e}")))?;
        if r.str()? != config.digest() {
            return Err(Error::Mismatch("config hash does not match the stored config".into()));
        }
        let stats_digest = r.str()?;
        let mut model = Model::new(config, 0)?;
        if r.u64()? as usize != model.params.len() {
            return Err(Error::Mismatch("parameter count differs from the config's layout".into()));
        }
        for p in model.params.iter_mut() {
            let name = r.str()?;
            let rank = r.u64()? as usize;
            let shape = (0..rank.min(8)).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            if name != p.name || shape != p.tensor.shape() || data.len() != p.tensor.len() {
                return Err(Error::Mismatch(format!("parameter `{name}` does not match `{}`", p.name)));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.err(format!("parameter `{name}` holds non-finite values")));
            }
            p.tensor.data_mut().copy_from_slice(&data);
        }
        if r.u64()? as usize != model.net.running.len() {
            return Err(Error::Mismatch("batch-norm layer count differs".into()));
        }
        for stats in &mut model.net.running {
            let initialized = r.u64()? != 0;
            let (mean, var) = (r.f64s()?, r.f64s()?);
            if mean.len() != stats.mean.len() || var.len() != stats.var.len() {
                return Err(Error::Mismatch("batch-norm channel count differs".into()));
            }
            *stats = super::RunningStats { mean, var, initialized };
        }
        r.finish()?;
        Ok((model, stats_digest))
    }

    /// Loads a checkpoint. With `expected_stats`, rejects checkpoints trained
    /// on data with different standardization statistics.
    pub fn load(path: &Path, expected_stats: Option<&str>) -> Result<(Self, String)> {
        let (model, digest) = Self::from_bytes(&read_file(path)?, path)?;
        if let Some(expected) = expected_stats {
            if expected != digest {
                return Err(Error::Mismatch(format!(
                    "checkpoint was trained on dataset statistics {digest}, cache has {expected}"
                )));
            }
        }
        Ok((model, digest))
    }

    /// Loads a checkpoint and checks it was built for `config`.
    pub fn load_for(path: &Path, config: &ModelConfig, expected_stats: Option<&str>) -> Result<Self> {
        let (model, _) = Self::load(path, expected_stats)?;
        if model.config() != config {
            return Err(Error::Mismatch(format!(
                "checkpoint config hash {} differs from requested {}",
                model.config().digest(),
                config.digest()
            )));
        }
        Ok(model)
    }
}
