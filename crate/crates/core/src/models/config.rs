use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kvconfig::KvMap;

/// Model family member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Gabmil,
    Pma,
    Msa,
    Minet,
    CapVema,
    CapDba,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Gabmil,
        Variant::Pma,
        Variant::Msa,
        Variant::Minet,
        Variant::CapVema,
        Variant::CapDba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Gabmil => "gabmil",
            Variant::Pma => "pma",
            Variant::Msa => "msa",
            Variant::Minet => "minet",
            Variant::CapVema => "cap_vema",
            Variant::CapDba => "cap_dba",
        }
    }

    pub fn is_cap(self) -> bool {
        matches!(self, Variant::CapVema | Variant::CapDba)
    }

    /// Whether the variant yields per-instance attention usable as an
    /// explanation. The self-attention encoder and the max-pooled MLP do not.
    pub fn exports_scores(self) -> bool {
        !matches!(self, Variant::Msa | Variant::Minet)
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
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Where cross-attention pooling normalizes its outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerNormPlacement {
    PreAggregation,
    PostAggregation,
    None,
}

impl LayerNormPlacement {
    pub fn name(self) -> &'static str {
        match self {
            LayerNormPlacement::PreAggregation => "pre",
            LayerNormPlacement::PostAggregation => "post",
            LayerNormPlacement::None => "none",
        }
    }
}

impl fmt::Display for LayerNormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerNormPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::PreAggregation),
            "post" => Ok(Self::PostAggregation),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown layernorm placement `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub heads: usize,
    /// Cross-attention pooling only: per-head linear projections. When off
    /// the pooler runs a single head on the raw channels.
    pub multihead: bool,
    /// Cross-attention pooling only: squeeze-and-co-excitation gate.
    pub sce: bool,
    pub layernorm: LayerNormPlacement,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Full configuration with every pooling component enabled.
    pub fn new(variant: Variant, channels: usize, heads: usize) -> Self {
        Self {
            variant,
            channels,
            heads,
            multihead: true,
            sce: true,
            layernorm: LayerNormPlacement::PreAggregation,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 {
            return Err(Error::Config("channels and heads must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        Ok(())
    }

    /// Number of heads the pooler actually runs.
    pub fn effective_heads(&self) -> usize {
        match self.variant {
            v if v.is_cap() && !self.multihead => 1,
            _ => self.heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.effective_heads()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let variant = kv
            .get::<Variant>("variant")?
            .ok_or_else(|| Error::Config("missing `variant`".into()))?;
        let cfg = Self {
            variant,
            channels: kv.get_or("channels", 32)?,
            heads: kv.get_or("heads", 2)?,
            multihead: kv.get_or("multihead", true)?,
            sce: kv.get_or("sce", true)?,
            layernorm: kv.get_or("layernorm", LayerNormPlacement::PreAggregation)?,
            seed: kv.get_or("seed", 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("channels", self.channels.to_string()),
            ("heads", self.heads.to_string()),
            ("multihead", self.multihead.to_string()),
            ("sce", self.sce.to_string()),
            ("layernorm", self.layernorm.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}
