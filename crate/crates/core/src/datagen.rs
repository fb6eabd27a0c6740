//! Synthetic verification exemplars and JSONL ingestion.
//!
//! Every instance of latent class `c` inside one exemplar is drawn as
//! `γ·d + (1−γ)·μ_c + σ·ε`, where `d` is a style vector shared by the whole
//! exemplar and `μ_c` a class prototype. Large `γ` makes all instances of a
//! bag look alike; `γ = 0` with small `σ` is separable by prototype matching.

use std::borrow::Cow;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvconfig::KvMap;
use crate::models::BagView;
use crate::numcore::Tensor;

/// One (query, bag, label) verification unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub id: String,
    /// `1×C`.
    pub query: Tensor,
    /// `N×C`.
    pub target: Tensor,
    pub label: bool,
    /// Which bag rows share the query's latent class, when known.
    pub key_mask: Option<Vec<bool>>,
}

impl Exemplar {
    pub fn bag_size(&self) -> usize {
        self.target.rows()
    }

    pub fn channels(&self) -> usize {
        self.query.cols()
    }

    pub fn view(&self) -> BagView<'_> {
        BagView::full(&self.query, &self.target)
    }

    pub fn num_keys(&self) -> Option<usize> {
        self.key_mask
            .as_ref()
            .map(|m| m.iter().filter(|&&k| k).count())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Validation {
            id: self.id.clone(),
            msg,
        };
        if self.query.rows() != 1 || self.query.cols() == 0 {
            return Err(fail(format!("query shape {:?}", self.query.shape())));
        }
        if self.target.rows() == 0 {
            return Err(fail("empty bag".into()));
        }
        if self.target.cols() != self.query.cols() {
            return Err(fail(format!(
                "bag width {} differs from query width {}",
                self.target.cols(),
                self.query.cols()
            )));
        }
        if !self.query.all_finite() || !self.target.all_finite() {
            return Err(fail("non-finite feature".into()));
        }
        if let Some(mask) = &self.key_mask {
            if mask.len() != self.target.rows() {
                return Err(fail("key mask length differs from bag size".into()));
            }
            let any = mask.iter().any(|&k| k);
            if any != self.label {
                return Err(fail(format!(
                    "label {} inconsistent with {} key instance(s)",
                    self.label as u8,
                    mask.iter().filter(|&&k| k).count()
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub bag_mean: f64,
    pub bag_var: f64,
    pub bag_min: usize,
    pub bag_max: usize,
    /// Key count of a positive bag is uniform over `key_min..=key_max`,
    /// truncated to the bag size.
    pub key_min: usize,
    pub key_max: usize,
    pub gamma: f64,
    pub sigma: f64,
    /// Scale of the dataset-wide template the style vectors scatter around.
    pub style_template: f64,
    /// Dimension of the subspace style deviations live in; `0` or any value
    /// `>= C` means all channels.
    pub style_rank: usize,
    pub positive_rate: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 200,
            channels: 32,
            bag_mean: 10.0,
            bag_var: 2.0,
            bag_min: 3,
            bag_max: 25,
            key_min: 1,
            key_max: 3,
            gamma: 0.7,
            sigma: 0.3,
            style_template: 0.0,
            style_rank: 16,
            positive_rate: 0.5,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 {
            return err("channels must be positive");
        }
        if self.bag_min < 1 || self.bag_min > self.bag_max {
            return err("need 1 <= bag_min <= bag_max");
        }
        if self.key_min < 1 || self.key_min > self.key_max {
            return err("need 1 <= key_min <= key_max");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return err("gamma must lie in [0, 1]");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return err("sigma must be positive so the query never equals a bag instance");
        }
        if !(self.style_template >= 0.0 && self.style_template.is_finite()) {
            return err("style_template must be non-negative");
        }
        if !(self.bag_var >= 0.0 && self.bag_mean.is_finite()) {
            return err("bag_var must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return err("positive_rate must lie in [0, 1]");
        }
        if self.num_classes < 6 {
            return err("num_classes must allow three pools of at least two classes");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            channels: kv.get_or("channels", d.channels)?,
            bag_mean: kv.get_or("bag_mean", d.bag_mean)?,
            bag_var: kv.get_or("bag_var", d.bag_var)?,
            bag_min: kv.get_or("bag_min", d.bag_min)?,
            bag_max: kv.get_or("bag_max", d.bag_max)?,
            key_min: kv.get_or("key_min", d.key_min)?,
            key_max: kv.get_or("key_max", d.key_max)?,
            gamma: kv.get_or("gamma", d.gamma)?,
            sigma: kv.get_or("sigma", d.sigma)?,
            style_template: kv.get_or("style_template", d.style_template)?,
            style_rank: kv.get_or("style_rank", d.style_rank)?,
            positive_rate: kv.get_or("positive_rate", d.positive_rate)?,
            n_train: kv.get_or("n_train", d.n_train)?,
            n_val: kv.get_or("n_val", d.n_val)?,
            n_test: kv.get_or("n_test", d.n_test)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("channels", self.channels.to_string()),
            ("bag_mean", self.bag_mean.to_string()),
            ("bag_var", self.bag_var.to_string()),
            ("bag_min", self.bag_min.to_string()),
            ("bag_max", self.bag_max.to_string()),
            ("key_min", self.key_min.to_string()),
            ("key_max", self.key_max.to_string()),
            ("gamma", self.gamma.to_string()),
            ("sigma", self.sigma.to_string()),
            ("style_template", self.style_template.to_string()),
            ("style_rank", self.style_rank.to_string()),
            ("positive_rate", self.positive_rate.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

const PROTOTYPE_STREAM: u64 = 0;
const POOL_STREAM: u64 = 1;
const STYLE_STREAM: u64 = 2;

/// RNG stream for exemplar `index` of split `split`.
fn exemplar_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split + 1) << 40) | index as u64);
    rng
}

/// `L×C` class prototypes with i.i.d. standard-normal entries.
pub fn make_class_prototypes<R: Rng>(num_classes: usize, channels: usize, rng: &mut R) -> Tensor {
    let data = (0..num_classes * channels)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![num_classes, channels], data).expect("prototype shape")
}

/// Where per-exemplar style vectors come from: `d = t·m + z·B`, with `m` a
/// fixed template, `z` standard normal and `B` an orthonormal basis scaled so
/// that `z·B` has unit variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSpace {
    pub template: Vec<f64>,
    /// `k×C`; `None` when deviations are isotropic over all channels.
    pub basis: Option<Tensor>,
}

impl StyleSpace {
    pub fn new<R: Rng>(config: &GenConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let template = (0..c)
            .map(|_| {
                config.style_template * {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                }
            })
            .collect();
        let basis = match config.style_rank {
            0 => None,
            k if k >= c => None,
            k => Some(random_orthonormal_rows(k, c, rng)),
        };
        Self { template, basis }
    }

    pub fn isotropic(channels: usize) -> Self {
        Self {
            template: vec![0.0; channels],
            basis: None,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let c = self.template.len();
        match &self.basis {
            None => self
                .template
                .iter()
                .map(|&m| {
                    m + {
                        let z: f64 = StandardNormal.sample(rng);
                        z
                    }
                })
                .collect(),
            Some(b) => {
                let k = b.rows();
                let scale = (c as f64 / k as f64).sqrt();
                let mut d = self.template.clone();
                for r in 0..k {
                    let z: f64 = StandardNormal.sample(rng);
                    for (x, &v) in d.iter_mut().zip(b.row_slice(r)) {
                        *x += scale * z * v;
                    }
                }
                d
            }
        }
    }
}

/// `k` orthonormal rows in `R^c` by Gram–Schmidt on Gaussian draws.
fn random_orthonormal_rows<R: Rng>(k: usize, c: usize, rng: &mut R) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Tensor::from_rows(&rows).expect("basis shape")
}

fn sample_bag_size<R: Rng>(config: &GenConfig, rng: &mut R) -> usize {
    let dist = Normal::new(config.bag_mean, config.bag_var.sqrt()).expect("validated");
    let x: f64 = dist.sample(rng);
    let n = x.round().max(0.0) as usize;
    n.clamp(config.bag_min, config.bag_max)
}

fn draw_instance<R: Rng>(
    config: &GenConfig,
    style: &[f64],
    prototype: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    let g = config.gamma;
    style
        .iter()
        .zip(prototype)
        .map(|(&d, &mu)| {
            let eps: f64 = StandardNormal.sample(rng);
            g * d + (1.0 - g) * mu + config.sigma * eps
        })
        .collect()
}

/// Draws one exemplar whose query class comes from `class_pool`.
pub fn sample_exemplar<R: Rng>(
    config: &GenConfig,
    prototypes: &Tensor,
    style_space: &StyleSpace,
    class_pool: &[usize],
    rng: &mut R,
    id: String,
) -> Result<Exemplar> {
    if class_pool.len() < 2 {
        return Err(Error::Config(
            "class pool needs at least two classes".into(),
        ));
    }
    let label = rng.random_bool(config.positive_rate);
    let q_class = class_pool[rng.random_range(0..class_pool.len())];
    let n = sample_bag_size(config, rng);
    let style = style_space.sample(rng);

    let mut keys = vec![false; n];
    if label {
        let hi = config.key_max.min(n);
        let lo = config.key_min.min(hi);
        let k = rng.random_range(lo..=hi);
        for i in sample_indices(rng, n, k) {
            keys[i] = true;
        }
    }

    let mut rows = Vec::with_capacity(n);
    for &is_key in &keys {
        let class = if is_key {
            q_class
        } else {
            // Uniform over the pool minus the query class.
            let pos = class_pool.iter().position(|&x| x == q_class).unwrap();
            let mut j = rng.random_range(0..class_pool.len() - 1);
            if j >= pos {
                j += 1;
            }
            class_pool[j]
        };
        rows.push(draw_instance(
            config,
            &style,
            prototypes.row_slice(class),
            rng,
        ));
    }
    let query = loop {
        let q = draw_instance(config, &style, prototypes.row_slice(q_class), rng);
        if rows.iter().all(|r| *r != q) {
            break q;
        }
    };

    let ex = Exemplar {
        id,
        query: Tensor::row(query),
        target: Tensor::from_rows(&rows)?,
        label,
        key_mask: Some(keys),
    };
    ex.validate()?;
    Ok(ex)
}

/// Train/validation/test exemplars drawn from disjoint class pools.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Exemplar>,
    pub validation: Vec<Exemplar>,
    pub test: Vec<Exemplar>,
    /// Class ids available to train, validation and test respectively.
    pub class_pools: [Vec<usize>; 3],
}

fn sample_split(
    config: &GenConfig,
    prototypes: &Tensor,
    style_space: &StyleSpace,
    pool: &[usize],
    split: u64,
    name: &str,
    count: usize,
) -> Result<Vec<Exemplar>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = exemplar_rng(config.seed, split, i);
            sample_exemplar(
                config,
                prototypes,
                style_space,
                pool,
                &mut rng,
                format!("{name}-{i:06}"),
            )
        })
        .collect()
}

/// Partitions the classes 60/20/20 and samples each split from its own pool.
/// Key masks are kept for the test split only.
pub fn make_splits(config: &GenConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(PROTOTYPE_STREAM);
    let prototypes = make_class_prototypes(config.num_classes, config.channels, &mut rng);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STYLE_STREAM);
    let style = StyleSpace::new(config, &mut rng);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(POOL_STREAM);
    let mut classes: Vec<usize> = (0..config.num_classes).collect();
    classes.shuffle(&mut rng);
    let n_val = (config.num_classes / 5).max(2);
    let n_train = config.num_classes - 2 * n_val;
    let pools = [
        classes[..n_train].to_vec(),
        classes[n_train..n_train + n_val].to_vec(),
        classes[n_train + n_val..].to_vec(),
    ];

    let strip = |mut v: Vec<Exemplar>| {
        v.iter_mut().for_each(|e| e.key_mask = None);
        v
    };
    let train = strip(sample_split(
        config,
        &prototypes,
        &style,
        &pools[0],
        0,
        "train",
        config.n_train,
    )?);
    let validation = strip(sample_split(
        config,
        &prototypes,
        &style,
        &pools[1],
        1,
        "val",
        config.n_val,
    )?);
    let test = sample_split(
        config,
        &prototypes,
        &style,
        &pools[2],
        2,
        "test",
        config.n_test,
    )?;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        class_pools: pools,
    })
}

/// Bag-size and label summary of a set of exemplars.
#[derive(Clone, Debug, PartialEq)]
pub struct BagStats {
    pub count: usize,
    pub mean_bag: f64,
    pub median_bag: f64,
    pub max_bag: usize,
    pub min_bag: usize,
    pub positive_rate: f64,
    /// Mean key count over positive exemplars with known keys.
    pub mean_keys: Option<f64>,
}

pub fn bag_stats(exemplars: &[Exemplar]) -> BagStats {
    let mut sizes: Vec<usize> = exemplars.iter().map(Exemplar::bag_size).collect();
    sizes.sort_unstable();
    let count = sizes.len();
    let median_bag = match count {
        0 => 0.0,
        n if n % 2 == 1 => sizes[n / 2] as f64,
        n => (sizes[n / 2 - 1] + sizes[n / 2]) as f64 / 2.0,
    };
    let keys: Vec<usize> = exemplars
        .iter()
        .filter(|e| e.label)
        .filter_map(Exemplar::num_keys)
        .collect();
    BagStats {
        count,
        mean_bag: sizes.iter().sum::<usize>() as f64 / count.max(1) as f64,
        median_bag,
        max_bag: sizes.last().copied().unwrap_or(0),
        min_bag: sizes.first().copied().unwrap_or(0),
        positive_rate: exemplars.iter().filter(|e| e.label).count() as f64 / count.max(1) as f64,
        mean_keys: (!keys.is_empty())
            .then(|| keys.iter().sum::<usize>() as f64 / keys.len() as f64),
    }
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    id: Cow<'a, str>,
    query: Vec<f64>,
    target: Vec<Vec<f64>>,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keys: Option<Vec<usize>>,
}

fn to_record(e: &Exemplar) -> Record<'_> {
    Record {
        id: Cow::Borrowed(&e.id),
        query: e.query.data().to_vec(),
        target: (0..e.target.rows())
            .map(|i| e.target.row_slice(i).to_vec())
            .collect(),
        label: e.label as u8,
        keys: e.key_mask.as_ref().map(|m| {
            m.iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(i, _)| i)
                .collect()
        }),
    }
}

fn from_record(r: Record<'_>, line: usize) -> Result<Exemplar> {
    let id = r.id.into_owned();
    let label = match r.label {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Validation {
                id,
                msg: format!("label must be 0 or 1, got {other}"),
            })
        }
    };
    let target = Tensor::from_rows(&r.target).map_err(|_| Error::Parse {
        line,
        msg: "bag rows have unequal lengths".into(),
    })?;
    let key_mask = match r.keys {
        None => None,
        Some(keys) => {
            let mut mask = vec![false; r.target.len()];
            for k in keys {
                let slot = mask.get_mut(k).ok_or_else(|| Error::Validation {
                    id: id.clone(),
                    msg: format!("key index {k} out of range"),
                })?;
                if *slot {
                    return Err(Error::Validation {
                        id: id.clone(),
                        msg: format!("duplicate key index {k}"),
                    });
                }
                *slot = true;
            }
            Some(mask)
        }
    };
    let ex = Exemplar {
        id,
        query: Tensor::row(r.query),
        target,
        label,
        key_mask,
    };
    ex.validate()?;
    Ok(ex)
}

/// One JSON object per exemplar, LF-terminated.
pub fn to_jsonl(exemplars: &[Exemplar]) -> String {
    let mut out = String::new();
    for e in exemplars {
        out.push_str(&serde_json::to_string(&to_record(e)).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, exemplars: &[Exemplar]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in exemplars {
        serde_json::to_writer(&mut w, &to_record(e)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<Exemplar>> {
    let mut out = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let ex = from_record(rec, line_no)?;
        match width {
            None => width = Some(ex.channels()),
            Some(w) if w != ex.channels() => {
                let msg = format!("width {} differs from earlier width {w}", ex.channels());
                return Err(Error::Validation { id: ex.id, msg });
            }
            _ => {}
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Exemplar>> {
    parse_jsonl(BufReader::new(std::fs::File::open(path)?))
}
