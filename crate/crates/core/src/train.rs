//! RMSprop, piecewise-constant learning rates, masked mini-batches and
//! early stopping on validation accuracy.

use std::borrow::Cow;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::Exemplar;
use crate::error::{Error, Result};
use crate::eval::accuracy_of;
use crate::kvconfig::KvMap;
use crate::models::{loss_and_grads, BagView, ModelConfig, ModelParams};
use crate::numcore::Tensor;

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-7;

/// Running mean of squared gradients, one accumulator per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub accum: ModelParams,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            accum: params.zeros_like(),
            rho: RMSPROP_RHO,
            eps: RMSPROP_EPS,
            lr,
        }
    }
}

/// `s ← ρs + (1−ρ)g²;  θ ← θ − lr·g/(√s + ε)`.
pub fn rmsprop_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) {
    let (rho, eps, lr) = (state.rho, state.eps, state.lr);
    for ((name, theta), (_, s)) in params.iter_mut().zip(state.accum.iter_mut()) {
        let Some(g) = grads.get(name) else { continue };
        for ((t, s), &g) in theta.data_mut().iter_mut().zip(s.data_mut()).zip(g.data()) {
            *s = rho * *s + (1.0 - rho) * g * g;
            *t -= lr * g / (s.sqrt() + eps);
        }
    }
}

/// Piecewise-constant schedule: `(threshold, lr)` pairs with strictly
/// increasing thresholds; the last threshold is usually infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule(pub Vec<(f64, f64)>);

impl LrSchedule {
    /// Parses `"5:1e-4,20:5e-5,inf:2e-5"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut segs = Vec::new();
        for part in s.split(',') {
            let (t, lr) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad schedule segment `{part}`")))?;
            let t: f64 = match t.trim() {
                "inf" => f64::INFINITY,
                other => other
                    .parse()
                    .map_err(|_| Error::Config(format!("bad threshold `{other}`")))?,
            };
            let lr: f64 = lr
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad learning rate `{lr}`")))?;
            segs.push((t, lr));
        }
        let sched = Self(segs);
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("empty lr schedule".into()));
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("schedule thresholds must increase".into()));
        }
        if self.0.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (t, lr)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_char(',')?;
            }
            if t.is_infinite() {
                write!(f, "inf:{lr:e}")?;
            } else {
                write!(f, "{t}:{lr:e}")?;
            }
        }
        Ok(())
    }
}

/// Learning rate of the first segment whose threshold exceeds `epoch`; the
/// last segment extends forever.
pub fn lr_schedule(epoch: usize, schedule: &LrSchedule) -> f64 {
    let e = epoch as f64;
    schedule
        .0
        .iter()
        .find(|&&(t, _)| t > e)
        .or(schedule.0.last())
        .map(|&(_, lr)| lr)
        .expect("validated schedule is non-empty")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub patience: usize,
    pub max_epochs: usize,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            schedule: LrSchedule(vec![(5.0, 1e-3), (20.0, 5e-4), (f64::INFINITY, 2e-4)]),
            patience: 5,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        self.schedule.validate()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let schedule = match kv.raw("lr_schedule") {
            Some(s) => LrSchedule::parse(s)?,
            None => d.schedule,
        };
        let cfg = Self {
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            schedule,
            patience: kv.get_or("patience", d.patience)?,
            max_epochs: kv.get_or("max_epochs", d.max_epochs)?,
            seed: kv.get_or("train_seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("lr_schedule", self.schedule.to_string()),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("train_seed", self.seed.to_string()),
        ]
    }
}

/// Exemplars padded to a common bag size.
#[derive(Clone, Debug, PartialEq)]
pub struct BagBatch {
    /// `B×C`.
    pub queries: Tensor,
    /// `B×Nmax×C`, zero at padded positions.
    pub targets: Tensor,
    /// Row-major `B×Nmax`.
    pub mask: Vec<bool>,
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

impl BagBatch {
    pub fn from_exemplars(exemplars: &[&Exemplar]) -> Result<Self> {
        let b = exemplars.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let c = exemplars[0].channels();
        let nmax = exemplars.iter().map(|e| e.bag_size()).max().unwrap();
        let mut queries = Vec::with_capacity(b * c);
        let mut targets = vec![0.0; b * nmax * c];
        let mut mask = vec![false; b * nmax];
        for (i, e) in exemplars.iter().enumerate() {
            if e.channels() != c {
                return Err(Error::Validation {
                    id: e.id.clone(),
                    msg: format!("width {} differs from batch width {c}", e.channels()),
                });
            }
            queries.extend_from_slice(e.query.data());
            let n = e.bag_size();
            targets[i * nmax * c..(i * nmax + n) * c].copy_from_slice(e.target.data());
            mask[i * nmax..i * nmax + n].fill(true);
        }
        Ok(Self {
            queries: Tensor::new(vec![b, c], queries)?,
            targets: Tensor::new(vec![b, nmax, c], targets)?,
            mask,
            labels: exemplars.iter().map(|e| e.label).collect(),
            ids: exemplars.iter().map(|e| e.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_bag(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        let n = self.max_bag();
        &self.mask[b * n..(b + 1) * n]
    }

    /// Query `1×C` and padded bag `Nmax×C` of row `b`.
    pub fn row(&self, b: usize) -> (Tensor, Tensor) {
        let (n, c) = (self.max_bag(), self.queries.cols());
        let q = Tensor::row(self.queries.row_slice(b).to_vec());
        let t = Tensor::new(
            vec![n, c],
            self.targets.data()[b * n * c..(b + 1) * n * c].to_vec(),
        )
        .expect("batch row shape");
        (q, t)
    }
}

/// Shuffles the exemplars and cuts them into padded batches.
pub fn make_batches(
    dataset: &[Exemplar],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BagBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<&Exemplar> = dataset.iter().collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(BagBatch::from_exemplars)
        .collect()
}

/// Mean BCE over the batch and its gradient. Rows run in parallel and are
/// reduced in row order.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &BagBatch,
) -> Result<(f64, ModelParams)> {
    let rows: Vec<(f64, ModelParams)> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let (q, t) = batch.row(b);
            let view = BagView {
                query: &q,
                target: &t,
                mask: Cow::Borrowed(batch.row_mask(b)),
            };
            loss_and_grads(cfg, params, &view, batch.labels[b]).map(|(l, g, _)| (l, g))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &rows {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    total.iter_mut().for_each(|(_, t)| {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    });
    Ok((loss * scale, total))
}

/// Tracks the best validation accuracy and how long ago it was seen.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records one epoch. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, acc: f64) -> (bool, bool) {
        if acc > self.best {
            self.best = acc;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_acc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(s, "{},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.val_acc);
    }
    s
}

/// Training loop with an arbitrary validation score in place of accuracy on
/// a held-out split.
pub fn train_with_validator<F>(
    cfg: &ModelConfig,
    mut params: ModelParams,
    train_set: &[Exemplar],
    tcfg: &TrainConfig,
    mut validate: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelParams) -> Result<f64>,
{
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut state = OptimizerState::new(&params, lr_schedule(0, &tcfg.schedule));
    let mut stopper = EarlyStopper::new(tcfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    for epoch in 0..tcfg.max_epochs {
        state.lr = lr_schedule(epoch, &tcfg.schedule);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in make_batches(train_set, tcfg.batch_size, &mut rng)? {
            let (loss, grads) =
                batch_loss_and_grads(cfg, &params, &batch).map_err(|e| match e {
                    Error::NonFinite(op) => Error::Numeric {
                        epoch,
                        msg: format!("non-finite value in {op}"),
                    },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    msg: "non-finite loss".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
            rmsprop_step(&mut params, &grads, &mut state);
        }
        let val_acc = validate(epoch, &params)?;
        history.push(EpochRecord {
            epoch,
            lr: state.lr,
            train_loss: loss_sum / count as f64,
            val_acc,
        });
        let (improved, stop) = stopper.observe(epoch, val_acc);
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch: stopper.best_epoch.expect("at least one epoch"),
        best_val_acc: stopper.best,
    })
}

/// Trains on `train_set`, early-stopping on accuracy over `validation`.
pub fn train(
    cfg: &ModelConfig,
    params: ModelParams,
    train_set: &[Exemplar],
    validation: &[Exemplar],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if validation.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    train_with_validator(cfg, params, train_set, tcfg, |_, p| {
        accuracy_of(cfg, p, validation)
    })
}
