//! Attention-score functions.
//!
//! Every function returns weights on the probability simplex restricted to the
//! valid positions of `mask`. Projections (`q_proj`, `k_proj`) are the outputs
//! of a pooler's shared per-head linear map; the functions here only score.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Per-head view of the variance-excited multiplicative attention parameters.
///
/// `r`/`r_bias` (`C×C`, `1×C`) are shared by all heads; `s`/`s_bias`
/// (`C×D`, `1×D`) belong to the head.
#[derive(Clone, Copy, Debug)]
pub struct VemaHead {
    pub r: Var,
    pub r_bias: Var,
    pub s: Var,
    pub s_bias: Var,
}

/// Per-head view of the distance-based attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct DbaHead {
    /// `1×D` channel weights.
    pub beta: Var,
    pub constants: DbaConstants,
}

/// Gated-attention parameters: `v`, `u` are `C×K`, `w` is `K×1`.
#[derive(Clone, Copy, Debug)]
pub struct GatedAttentionParams {
    pub v: Var,
    pub u: Var,
    pub w: Var,
}

/// Normalizing constants of the L1-distance logit: the mean and standard
/// deviation of `Σ_j |a_j − b_j|` for `a, b ~ N(0, I_D)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbaConstants {
    pub c: f64,
    pub s: f64,
}

pub fn dba_constants(d: usize) -> Result<DbaConstants> {
    if d == 0 {
        return Err(Error::Contract("dba_constants requires D >= 1".into()));
    }
    let d = d as f64;
    Ok(DbaConstants {
        c: (4.0 / PI).sqrt() * d,
        s: ((2.0 - 4.0 / PI) * d).sqrt(),
    })
}

/// Trainable parameter count of VEMA for `channels` split over `heads`.
pub fn vema_param_count(channels: usize, heads: usize) -> usize {
    let d = channels / heads;
    channels * channels + channels + heads * (channels * d + d)
}

/// Trainable parameter count of DBA: one weight per channel of every head.
pub fn dba_param_count(channels: usize, heads: usize) -> usize {
    heads * (channels / heads)
}

/// Variance-excited multiplicative attention for one head.
///
/// `δ = sigmoid(relu((variance(v_target) − 1)·R + r_bias)·S + s_bias)` gates
/// the channels of the scaled dot product between `q_proj` (`1×D`) and every
/// row of `k_proj` (`N×D`). The variance is taken over the valid rows of the
/// unprojected bag `v_target` (`N×C`).
pub fn vema_scores(
    g: &mut Graph,
    q_proj: Var,
    k_proj: Var,
    v_target: Var,
    head: &VemaHead,
    mask: &[bool],
) -> Result<Var> {
    let var = g.masked_variance(v_target, mask)?;
    let centered = g.affine(var, 1.0, -1.0)?;
    let hidden = g.matmul(centered, head.r)?;
    let hidden = g.add(hidden, head.r_bias)?;
    let hidden = g.relu(hidden)?;
    let gate = g.matmul(hidden, head.s)?;
    let gate = g.add(gate, head.s_bias)?;
    let delta = g.sigmoid(gate)?;
    let d = g.value(q_proj).cols();
    let gated_q = g.mul(q_proj, delta)?;
    let kt = g.transpose(k_proj)?;
    let logits = g.matmul(gated_q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    g.masked_softmax(logits, mask)
}

/// Distance-based attention for one head: softmax over instances of
/// `(c − Σ_m β_m |q_m − k_{n,m}|) / s`.
pub fn dba_scores(
    g: &mut Graph,
    q_proj: Var,
    k_proj: Var,
    head: &DbaHead,
    mask: &[bool],
) -> Result<Var> {
    let diff = g.sub(k_proj, q_proj)?;
    let dist = g.abs(diff)?;
    let beta_col = g.transpose(head.beta)?;
    let weighted = g.matmul(dist, beta_col)?;
    let DbaConstants { c, s } = head.constants;
    let logits = g.affine(weighted, -1.0 / s, c / s)?;
    let logits = g.transpose(logits)?;
    g.masked_softmax(logits, mask)
}

/// Gated attention: `a_n ∝ exp(wᵀ(tanh(h_n V) ⊙ sigmoid(h_n U)))`.
pub fn gated_attention_scores(
    g: &mut Graph,
    h_inst: Var,
    params: &GatedAttentionParams,
    mask: &[bool],
) -> Result<Var> {
    let a = g.matmul(h_inst, params.v)?;
    let a = g.tanh(a)?;
    let b = g.matmul(h_inst, params.u)?;
    let b = g.sigmoid(b)?;
    let gated = g.mul(a, b)?;
    let logits = g.matmul(gated, params.w)?;
    let logits = g.transpose(logits)?;
    g.masked_softmax(logits, mask)
}

/// Row-wise `softmax(Q·Kᵀ/√D)` over the valid key positions → `S×N`.
pub fn scaled_dot_scores(g: &mut Graph, q: Var, k: Var, mask: &[bool]) -> Result<Var> {
    let d = g.value(q).cols();
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    g.masked_softmax(logits, mask)
}

/// L1-normalized indicator of the maximal valid similarities. Ties are exact
/// float equality.
pub fn argmax_indicator(sims: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if sims.len() != mask.len() {
        return Err(Error::Shape {
            op: "argmax_indicator",
            lhs: vec![sims.len()],
            rhs: vec![mask.len()],
        });
    }
    let max = sims
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(None, |acc: Option<f64>, s| {
            Some(acc.map_or(s, |a| a.max(s)))
        })
        .ok_or(Error::DegenerateBag)?;
    let hits: Vec<bool> = sims
        .iter()
        .zip(mask)
        .map(|(&s, &m)| m && s == max)
        .collect();
    let count = hits.iter().filter(|&&h| h).count() as f64;
    Ok(hits
        .into_iter()
        .map(|h| if h { 1.0 / count } else { 0.0 })
        .collect())
}

/// Per-head attention weights over one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    /// `h×N`.
    pub per_head: Tensor,
    pub mask: Vec<bool>,
}

impl AttentionScores {
    pub fn heads(&self) -> usize {
        self.per_head.rows()
    }

    /// Arithmetic mean over heads.
    pub fn head_mean(&self) -> Vec<f64> {
        let (h, n) = (self.per_head.rows(), self.per_head.cols());
        (0..n)
            .map(|j| (0..h).map(|i| self.per_head.get(i, j)).sum::<f64>() / h as f64)
            .collect()
    }

    /// Scores restricted to valid positions, head-averaged.
    pub fn valid_head_mean(&self) -> Vec<f64> {
        self.head_mean()
            .into_iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s)
            .collect()
    }

    /// Checks the simplex invariant on every head.
    pub fn check(&self, tol: f64) -> Result<()> {
        for i in 0..self.heads() {
            let row = self.per_head.row_slice(i);
            let mut total = 0.0;
            for (&v, &m) in row.iter().zip(&self.mask) {
                if v < 0.0 || (!m && v != 0.0) {
                    return Err(Error::Contract(format!("head {i}: weight {v} off simplex")));
                }
                total += v;
            }
            if (total - 1.0).abs() > tol {
                return Err(Error::Contract(format!("head {i}: weights sum to {total}")));
            }
        }
        Ok(())
    }
}
