use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variant: the full model or one of the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Global branch removed; the attention keys/values see an all-zero block.
    NoMlp,
    /// Local branch replaced by a learned constant query block.
    NoMscnn,
    /// Attention replaced by concatenation and a linear head.
    NoCa,
    /// Local branch with a single kernel size of 5.
    FixedKernel5,
    /// Queries from the global branch, keys/values from the local branch.
    SwappedCa,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoMlp,
        Variant::NoMscnn,
        Variant::NoCa,
        Variant::FixedKernel5,
        Variant::SwappedCa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMlp => "no-mlp",
            Variant::NoMscnn => "no-mscnn",
            Variant::NoCa => "no-ca",
            Variant::FixedKernel5 => "fixed-kernel-5",
            Variant::SwappedCa => "swapped-ca",
        }
    }

    pub fn has_global(self) -> bool {
        self != Variant::NoMlp
    }

    pub fn has_local(self) -> bool {
        self != Variant::NoMscnn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Architecture hyperparameters. Defaults are the reference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input steps.
    pub m: usize,
    /// Predicted steps.
    pub n: usize,
    /// Variables per step.
    pub vars: usize,
    /// Most recent input steps fed to the local branch.
    pub prior: usize,
    /// Hidden width of both branches and the fusion.
    pub d_model: usize,
    /// Hidden neurons of each global MLP block.
    pub hidden: usize,
    pub mlp_blocks: usize,
    pub conv_blocks: usize,
    /// Odd kernel sizes of the local branch.
    pub kernels: Vec<usize>,
    pub heads: usize,
    pub dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 48,
            n: 12,
            vars: 3,
            prior: 24,
            d_model: 256,
            hidden: 2048,
            mlp_blocks: 1,
            conv_blocks: 2,
            kernels: vec![3, 5, 7],
            heads: 8,
            dropout: 0.05,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m < 2 {
            return fail(format!("m: need at least 2 input steps, got {}", self.m));
        }
        if self.n == 0 {
            return fail("n: must be at least 1".into());
        }
        if self.vars == 0 {
            return fail("vars: must be at least 1".into());
        }
        if self.prior == 0 || self.prior > self.m {
            return fail(format!("prior: must lie in 1..={} (m), got {}", self.m, self.prior));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model: must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads: {} does not divide d_model {}", self.heads, self.d_model));
        }
        if self.hidden == 0 {
            return fail("hidden: must be at least 1".into());
        }
        if self.kernels.is_empty() {
            return fail("kernels: at least one kernel size is required".into());
        }
        if let Some(k) = self.kernels.iter().find(|k| *k % 2 == 0) {
            return fail(format!("kernels: size {k} is even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout: must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Kernel sizes actually used, after applying the variant.
    pub fn kernel_sizes(&self) -> Vec<usize> {
        match self.variant {
            Variant::FixedKernel5 => vec![5],
            _ => self.kernels.clone(),
        }
    }

    /// Length of the local branch sequence.
    pub fn local_len(&self) -> usize {
        self.prior + self.n
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        crate::codec::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn constraint_violations_name_the_field() {
        let bad = |c: ModelConfig, field: &str| match c.validate() {
            Err(Error::Config(msg)) => assert!(msg.starts_with(field), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        };
        bad(ModelConfig { kernels: vec![3, 4], ..Default::default() }, "kernels");
        bad(ModelConfig { heads: 7, ..Default::default() }, "heads");
        bad(ModelConfig { prior: 49, ..Default::default() }, "prior");
        bad(ModelConfig { n: 0, ..Default::default() }, "n");
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("no-such".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        assert_eq!(ModelConfig { variant: Variant::FixedKernel5, ..Default::default() }.kernel_sizes(), [5]);
    }
}
