//! Experiment configuration: one flat `key = value` file covering the data
//! source, the model, training, repetition and the sweep/ablation settings.
//!
//! Keys:
//!
//! ```text
//! seed = 0              master seed; data generation uses it directly and
//!                       round r initializes the model with seed + r
//! train_seed            optional; round r shuffles with train_seed + r
//!                       (default: the master seed)
//! rounds = 1
//! dataset = dir         optional; a directory holding train.jsonl,
//!                       validation.jsonl and test.jsonl. Without it the
//!                       generator keys below define the data.
//! out = dir             optional default for --out
//! num_classes, channels, bag_mean, bag_var, bag_min, bag_max, key_min,
//! key_max, gamma, sigma, style_template, style_rank, positive_rate,
//! n_train, n_val, n_test
//! variant, heads, multihead, sce, layernorm
//! batch_size, lr_schedule, patience, max_epochs
//! sweep_axis = train_size | bag_size
//! sweep_values = 500,1000 (train_size) or 10:2,20:4 (bag_size mean:var)
//! sweep_variants = baseline,gabmil,cap_vema,cap_dba
//! ablate_attention = cap_vema,cap_dba
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use capmil::datagen::GenConfig;
use capmil::kvconfig::KvMap;
use capmil::models::{LayerNormPlacement, ModelConfig, Variant};
use capmil::train::TrainConfig;
use capmil::{Error, Result};

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "validation.jsonl", "test.jsonl"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    TrainSize,
    BagSize,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_size" => Ok(Self::TrainSize),
            "bag_size" => Ok(Self::BagSize),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (train_size or bag_size)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TrainSize => "train_size",
            Self::BagSize => "bag_size",
        })
    }
}

/// One point on a sweep axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    TrainSize(usize),
    /// Mean and variance of the bag-size distribution.
    BagSize(f64, f64),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TrainSize(n) => write!(f, "{n}"),
            Self::BagSize(m, v) => write!(f, "{m}:{v}"),
        }
    }
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad {axis} sweep value `{s}`"));
        match axis {
            SweepAxis::TrainSize => s.trim().parse().map(Self::TrainSize).map_err(|_| bad()),
            SweepAxis::BagSize => {
                let (m, v) = s.trim().split_once(':').ok_or_else(bad)?;
                let m: f64 = m.parse().map_err(|_| bad())?;
                let v: f64 = v.parse().map_err(|_| bad())?;
                if !(m >= 1.0 && v >= 0.0) {
                    return Err(bad());
                }
                Ok(Self::BagSize(m, v))
            }
        }
    }

    pub fn defaults(axis: SweepAxis) -> Vec<Self> {
        match axis {
            SweepAxis::TrainSize => [500, 1000, 2000, 4000, 8000]
                .into_iter()
                .map(Self::TrainSize)
                .collect(),
            SweepAxis::BagSize => [(10.0, 2.0), (20.0, 4.0), (50.0, 10.0)]
                .into_iter()
                .map(|(m, v)| Self::BagSize(m, v))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    /// Raw comma-separated values; parsed once the axis is known.
    pub values: Option<String>,
    pub variants: Vec<Variant>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: None,
            values: None,
            variants: vec![
                Variant::Baseline,
                Variant::Gabmil,
                Variant::CapVema,
                Variant::CapDba,
            ],
        }
    }
}

impl SweepConfig {
    pub fn values_for(&self, axis: SweepAxis) -> Result<Vec<SweepValue>> {
        match &self.values {
            None => Ok(SweepValue::defaults(axis)),
            Some(s) => s.split(',').map(|v| SweepValue::parse(axis, v)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Directory of JSONL splits; `None` means generate from `gen`.
    pub dataset: Option<PathBuf>,
    pub gen: GenConfig,
    /// `None` when the file names no variant (enough for `gen`).
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    /// Explicit shuffling seed; the master seed when absent.
    pub train_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sweep: SweepConfig,
    pub ablate_attention: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 1,
            dataset: None,
            gen: GenConfig::default(),
            model: None,
            train: TrainConfig::default(),
            train_seed: None,
            out: None,
            sweep: SweepConfig::default(),
            ablate_attention: vec![Variant::CapVema, Variant::CapDba],
        }
    }
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config("empty variant list".into()));
    }
    Ok(v)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvMap, base_dir: &Path) -> Result<Self> {
        let d = Self::default();
        let gen = GenConfig::from_kv(kv)?;
        let model = if kv.contains("variant") {
            let mut m = ModelConfig::from_kv(kv)?;
            m.seed = gen.seed;
            Some(m)
        } else {
            // Model keys without a variant are a mistake, not a no-op.
            for k in ["heads", "multihead", "sce", "layernorm"] {
                if kv.contains(k) {
                    return Err(Error::Config(format!("`{k}` given without `variant`")));
                }
            }
            None
        };
        let cfg = Self {
            seed: gen.seed,
            rounds: kv.get_or("rounds", d.rounds)?,
            dataset: kv.raw("dataset").map(|p| resolve(base_dir, p)),
            train: TrainConfig::from_kv(kv)?,
            train_seed: kv.get("train_seed")?,
            out: kv.raw("out").map(|p| resolve(base_dir, p)),
            sweep: SweepConfig {
                axis: kv.get("sweep_axis")?,
                values: kv.raw("sweep_values").map(str::to_string),
                variants: match kv.raw("sweep_variants") {
                    Some(s) => parse_variants(s)?,
                    None => d.sweep.variants,
                },
            },
            ablate_attention: match kv.raw("ablate_attention") {
                Some(s) => parse_variants(s)?,
                None => d.ablate_attention,
            },
            gen,
            model,
        };
        kv.deny_unused()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvMap::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&kv, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if let Some(dir) = &self.dataset {
            for f in SPLIT_FILES {
                if !dir.join(f).is_file() {
                    return Err(Error::Config(format!(
                        "dataset file {} does not exist",
                        dir.join(f).display()
                    )));
                }
            }
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        for v in &self.ablate_attention {
            if !v.is_cap() {
                return Err(Error::Config(format!(
                    "ablate_attention takes cap_vema or cap_dba, not {v}"
                )));
            }
        }
        self.train.validate()
    }

    /// Replaces the master seed (and with it the generator seed).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gen.seed = seed;
        if let Some(m) = &mut self.model {
            m.seed = seed;
        }
        self
    }

    /// Model and training configuration for round `r`.
    pub fn round(&self, model: &ModelConfig, r: usize) -> (ModelConfig, TrainConfig) {
        let m = model.clone().with_seed(round_seed(self.seed, r));
        let t = TrainConfig {
            seed: round_seed(self.train_seed.unwrap_or(self.seed), r),
            ..self.train.clone()
        };
        (m, t)
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("config names no `variant`".into()))
    }

    /// Every setting as `key = value` pairs, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("rounds".into(), self.rounds.to_string()),
            (
                "dataset".into(),
                self.dataset
                    .as_ref()
                    .map_or("generated".into(), |p| p.display().to_string()),
            ),
        ];
        out.extend(
            self.gen
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v)),
        );
        if let Some(m) = &self.model {
            out.extend(
                m.to_pairs()
                    .into_iter()
                    .filter(|(k, _)| !matches!(*k, "channels" | "seed"))
                    .map(|(k, v)| (k.to_string(), v)),
            );
        }
        out.extend(
            self.train
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| *k != "train_seed")
                .map(|(k, v)| (k.to_string(), v)),
        );
        if let Some(s) = self.train_seed {
            out.push(("train_seed".into(), s.to_string()));
        }
        out
    }
}

/// Seed for round `r`.
pub fn round_seed(master: u64, round: usize) -> u64 {
    master.wrapping_add(round as u64)
}

/// Flag columns shared by the sweep and ablation outputs.
pub fn flag_columns(m: &ModelConfig) -> [String; 4] {
    let attention = match m.variant {
        Variant::CapVema => "vema",
        Variant::CapDba => "dba",
        _ => "none",
    };
    let cap = m.variant.is_cap();
    [
        attention.to_string(),
        (cap && m.multihead).to_string(),
        (cap && m.sce).to_string(),
        if cap {
            m.layernorm.to_string()
        } else {
            LayerNormPlacement::None.to_string()
        },
    ]
}
