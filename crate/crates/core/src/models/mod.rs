//! Full verification models: shared input normalization, a pooler, and the
//! weighted-product Siamese head `p = sigmoid(Σ α_i vQ_i vP_i)`.

mod checkpoint;
mod config;
mod params;

use std::borrow::Cow;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{LayerNormPlacement, ModelConfig, Variant};
pub use params::ModelParams;

use crate::attention::AttentionScores;
use crate::error::{Error, Result};
use crate::numcore::{logistic, Graph, Tensor, Var};
use crate::pooling::{
    baseline_score, cap_pool, gabmil_pool, minet_pool, msa_pool, pma_pool, siamese_similarity,
    PoolOutput,
};
use params::Bound;

/// Logits are clamped to `±LOGIT_CLAMP` before the sigmoid and the loss.
pub const LOGIT_CLAMP: f64 = 30.0;

/// One exemplar as seen by a model: a `1×C` query, an `N×C` bag and the
/// validity mask of the bag rows (padding rows are `false`).
#[derive(Clone, Debug)]
pub struct BagView<'a> {
    pub query: &'a Tensor,
    pub target: &'a Tensor,
    pub mask: Cow<'a, [bool]>,
}

impl<'a> BagView<'a> {
    /// A view with every bag row valid.
    pub fn full(query: &'a Tensor, target: &'a Tensor) -> Self {
        Self {
            query,
            target,
            mask: Cow::Owned(vec![true; target.rows()]),
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.query.rows() != 1 || self.query.cols() != channels {
            return Err(Error::Shape {
                op: "forward.query",
                lhs: vec![1, channels],
                rhs: self.query.shape().to_vec(),
            });
        }
        if self.target.cols() != channels || self.target.rows() != self.mask.len() {
            return Err(Error::Shape {
                op: "forward.target",
                lhs: vec![self.mask.len(), channels],
                rhs: self.target.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Clamped similarity logit.
    pub logit: f64,
    pub prob: f64,
    /// Per-head attention for variants that export it.
    pub scores: Option<AttentionScores>,
}

struct Built {
    logit: Var,
    scores: Option<AttentionScores>,
}

fn collect_scores(g: &Graph, heads: &[Var], mask: &[bool]) -> Result<AttentionScores> {
    let n = mask.len();
    let mut data = Vec::with_capacity(heads.len() * n);
    for &h in heads {
        data.extend_from_slice(g.value(h).data());
    }
    Ok(AttentionScores {
        per_head: Tensor::new(vec![heads.len(), n], data)?,
        mask: mask.to_vec(),
    })
}

fn build(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, view: &BagView<'_>) -> Result<Built> {
    view.check(cfg.channels)?;
    let mask: &[bool] = &view.mask;
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateBag);
    }
    let q_raw = g.constant(view.query.clone());
    let t_raw = g.constant(view.target.clone());
    let ln = bound.input_ln()?;
    let query = ln.apply(g, q_raw)?;
    let target = ln.apply(g, t_raw)?;
    let alpha = bound.get("alpha")?;

    let pooled: PoolOutput = match cfg.variant {
        Variant::Baseline => {
            let (logit, weights) = baseline_score(g, query, target, alpha, mask)?;
            let logit = g.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)?;
            let scores = AttentionScores {
                per_head: Tensor::row(weights),
                mask: mask.to_vec(),
            };
            return Ok(Built {
                logit,
                scores: Some(scores),
            });
        }
        Variant::Gabmil => gabmil_pool(g, query, target, &bound.gabmil()?, mask)?,
        Variant::Pma => pma_pool(g, query, target, &bound.pma(cfg)?, mask)?,
        Variant::Msa => msa_pool(g, query, target, &bound.msa(cfg)?, mask)?,
        Variant::Minet => {
            let v_p = minet_pool(g, target, &bound.minet()?, mask)?;
            PoolOutput {
                v_p,
                v_q: query,
                head_scores: None,
            }
        }
        Variant::CapVema | Variant::CapDba => cap_pool(g, query, target, &bound.cap(cfg)?, mask)?,
    };
    let sim = siamese_similarity(g, pooled.v_q, pooled.v_p, alpha)?;
    let logit = g.clamp(sim, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let scores = pooled
        .head_scores
        .as_deref()
        .map(|h| collect_scores(g, h, mask))
        .transpose()?;
    Ok(Built { logit, scores })
}

/// Inference pass.
pub fn forward(cfg: &ModelConfig, params: &ModelParams, view: &BagView<'_>) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let built = build(&mut g, cfg, &bound, view)?;
    let logit = g.value(built.logit).item();
    Ok(Prediction {
        logit,
        prob: logistic(logit),
        scores: built.scores,
    })
}

/// Binary cross-entropy of one exemplar and its gradient with respect to
/// every parameter.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    view: &BagView<'_>,
    label: bool,
) -> Result<(f64, ModelParams, Prediction)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, true);
    let built = build(&mut g, cfg, &bound, view)?;
    let loss = g.bce_with_logits(built.logit, if label { 1.0 } else { 0.0 })?;
    let mut grads = g.backward(loss)?;
    let mut out = params.zeros_like();
    for (name, var) in bound.iter() {
        if let Some(t) = out.get_mut(name) {
            *t = grads.take(*var);
        }
    }
    let logit = g.value(built.logit).item();
    Ok((
        g.value(loss).item(),
        out,
        Prediction {
            logit,
            prob: logistic(logit),
            scores: built.scores,
        },
    ))
}

/// Binary cross-entropy of a probability, evaluated through the clamped logit.
pub fn bce_loss(prob: f64, label: bool) -> f64 {
    let p = prob.clamp(logistic(-LOGIT_CLAMP), logistic(LOGIT_CLAMP));
    let z = (p / (1.0 - p)).ln();
    let y = if label { 1.0 } else { 0.0 };
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// `Σ_i α_i · vQ_i · vP_i` on plain vectors.
pub fn siamese_similarity_value(v_q: &[f64], v_p: &[f64], alpha: &[f64]) -> f64 {
    v_q.iter()
        .zip(v_p)
        .zip(alpha)
        .map(|((q, p), a)| a * q * p)
        .sum()
}

/// One (query, instance) pair of the pairwise representation of an exemplar.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePair {
    pub query: Vec<f64>,
    pub instance: Vec<f64>,
    pub label: Option<bool>,
}

/// Splits an exemplar into `N` query/instance pairs; pair labels come from
/// the key mask when one is known.
pub fn exemplar_to_pairs(ex: &crate::datagen::Exemplar) -> Vec<InstancePair> {
    let q = ex.query.data().to_vec();
    (0..ex.target.rows())
        .map(|n| InstancePair {
            query: q.clone(),
            instance: ex.target.row_slice(n).to_vec(),
            label: ex.key_mask.as_ref().map(|m| m[n]),
        })
        .collect()
}

/// Bag label implied by pair labels: positive iff any pair is positive.
/// `None` when some pair label is unknown.
pub fn bag_label_from_pairs(pairs: &[InstancePair]) -> Option<bool> {
    pairs
        .iter()
        .map(|p| p.label)
        .collect::<Option<Vec<bool>>>()
        .map(|labels| labels.into_iter().any(|l| l))
}
