//! Bag poolers producing the Siamese twin outputs `(v_p, v_q)`.
//!
//! All poolers take the already layer-normalized query (`1×C`) and bag
//! (`N×C`). Parameter structs hold graph handles; the `models` module binds
//! them from a named parameter set.

use crate::attention::{
    argmax_indicator, dba_scores, gated_attention_scores, scaled_dot_scores, vema_scores,
    DbaConstants, DbaHead, GatedAttentionParams, VemaHead,
};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Var, LN_EPS};

/// Output of a pooler. `head_scores` holds one `1×N` weight row per head for
/// poolers that export attention.
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub v_p: Var,
    pub v_q: Var,
    pub head_scores: Option<Vec<Var>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub scale: Var,
    pub shift: Var,
}

impl LayerNormParams {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.scale, self.shift, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add(y, self.bias)
    }
}

/// Attention function used inside cross-attention pooling.
#[derive(Clone, Debug)]
pub enum CapAttention {
    Vema {
        r: Var,
        r_bias: Var,
        s: Vec<Var>,
        s_bias: Vec<Var>,
    },
    Dba {
        beta: Vec<Var>,
        constants: DbaConstants,
    },
}

/// Query-driven channel gate shared by both twins.
#[derive(Clone, Debug)]
pub struct SceParams {
    pub j: Var,
    pub j_bias: Var,
    pub m: Vec<Var>,
    pub m_bias: Vec<Var>,
}

#[derive(Clone, Debug)]
pub enum CapNorm {
    None,
    /// One `D`-wide normalization per head, applied before aggregation.
    PreAggregation(Vec<LayerNormParams>),
    /// A single `C`-wide normalization of the concatenated outputs.
    PostAggregation(LayerNormParams),
}

/// Cross-attention pooling parameters. `projections` is `None` for the
/// non-headed variant (a single head and no linear map).
#[derive(Clone, Debug)]
pub struct CapParams {
    pub projections: Option<Vec<Var>>,
    pub attention: CapAttention,
    pub sce: Option<SceParams>,
    pub norm: CapNorm,
}

impl CapParams {
    pub fn heads(&self) -> usize {
        self.projections.as_ref().map_or(1, Vec::len)
    }
}

/// Squeeze-and-co-excitation gate for head `j`: `sigmoid(relu(x·J + j_b)·M_j + m_b_j)`.
///
/// The squeeze over the instance axis of a single query row is the row itself.
pub fn mhsce(g: &mut Graph, query: Var, params: &SceParams, head: usize) -> Result<Var> {
    let hidden = g.matmul(query, params.j)?;
    let hidden = g.add(hidden, params.j_bias)?;
    let hidden = g.relu(hidden)?;
    let gate = g.matmul(hidden, params.m[head])?;
    let gate = g.add(gate, params.m_bias[head])?;
    g.sigmoid(gate)
}

pub fn cap_pool(
    g: &mut Graph,
    query: Var,
    target: Var,
    params: &CapParams,
    mask: &[bool],
) -> Result<PoolOutput> {
    let heads = params.heads();
    let mut out_p = Vec::with_capacity(heads);
    let mut out_q = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    for j in 0..heads {
        let (q_proj, k_proj) = match &params.projections {
            Some(w) => (g.matmul(query, w[j])?, g.matmul(target, w[j])?),
            None => (query, target),
        };
        let s = match &params.attention {
            CapAttention::Vema {
                r,
                r_bias,
                s,
                s_bias,
            } => {
                let head = VemaHead {
                    r: *r,
                    r_bias: *r_bias,
                    s: s[j],
                    s_bias: s_bias[j],
                };
                vema_scores(g, q_proj, k_proj, target, &head, mask)?
            }
            CapAttention::Dba { beta, constants } => {
                let head = DbaHead {
                    beta: beta[j],
                    constants: *constants,
                };
                dba_scores(g, q_proj, k_proj, &head, mask)?
            }
        };
        let (mut value, mut twin) = match &params.sce {
            Some(sce) => {
                let gate = mhsce(g, query, sce, j)?;
                (g.mul(k_proj, gate)?, g.mul(q_proj, gate)?)
            }
            None => (k_proj, q_proj),
        };
        if let CapNorm::PreAggregation(norms) = &params.norm {
            value = norms[j].apply(g, value)?;
            twin = norms[j].apply(g, twin)?;
        }
        out_p.push(g.matmul(s, value)?);
        out_q.push(twin);
        scores.push(s);
    }
    let (mut v_p, mut v_q) = if heads == 1 {
        (out_p[0], out_q[0])
    } else {
        (g.concat_cols(&out_p)?, g.concat_cols(&out_q)?)
    };
    if let CapNorm::PostAggregation(norm) = &params.norm {
        v_p = norm.apply(g, v_p)?;
        v_q = norm.apply(g, v_q)?;
    }
    Ok(PoolOutput {
        v_p,
        v_q,
        head_scores: Some(scores),
    })
}

pub fn gabmil_pool(
    g: &mut Graph,
    query: Var,
    target: Var,
    params: &GatedAttentionParams,
    mask: &[bool],
) -> Result<PoolOutput> {
    let s = gated_attention_scores(g, target, params, mask)?;
    let v_p = g.matmul(s, target)?;
    Ok(PoolOutput {
        v_p,
        v_q: query,
        head_scores: Some(vec![s]),
    })
}

/// Multi-head attention with per-head query/key/value maps and an output map.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub query: Vec<Linear>,
    pub key: Vec<Linear>,
    pub value: Vec<Linear>,
    pub output: Linear,
}

/// Two-layer position-wise feed-forward network with a ReLU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.apply(g, x)?;
        let h = g.relu(h)?;
        self.output.apply(g, h)
    }
}

/// Post-residual attention block: `H = LN(X + MHA(X, Y)); out = LN(H + FF(H))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub mha: MhaParams,
    pub ln1: LayerNormParams,
    pub ff: FeedForward,
    pub ln2: LayerNormParams,
}

/// Returns the `S×C` output and each head's `S×N` weights.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    y: Var,
    params: &MhaParams,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let heads = params.query.len();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for j in 0..heads {
        let q = params.query[j].apply(g, x)?;
        let k = params.key[j].apply(g, y)?;
        let v = params.value[j].apply(g, y)?;
        let a = scaled_dot_scores(g, q, k, mask)?;
        outs.push(g.matmul(a, v)?);
        weights.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((params.output.apply(g, cat)?, weights))
}

impl AttentionBlock {
    pub fn apply(&self, g: &mut Graph, x: Var, y: Var, mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let (a, weights) = multi_head_attention(g, x, y, &self.mha, mask)?;
        let h = g.add(x, a)?;
        let h = self.ln1.apply(g, h)?;
        let f = self.ff.apply(g, h)?;
        let out = g.add(h, f)?;
        Ok((self.ln2.apply(g, out)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct PmaParams {
    /// Learnable `1×C` seed.
    pub seed: Var,
    pub block: AttentionBlock,
}

/// Pooling by multi-head attention with two seeds: the learnable seed yields
/// `v_p` and the query yields `v_q`. Exported scores are the learnable seed's
/// attention row per head.
pub fn pma_pool(
    g: &mut Graph,
    query: Var,
    target: Var,
    params: &PmaParams,
    mask: &[bool],
) -> Result<PoolOutput> {
    let seeds = g.concat_rows(&[params.seed, query])?;
    let (out, weights) = params.block.apply(g, seeds, target, mask)?;
    let v_p = g.slice_rows(out, 0, 1)?;
    let v_q = g.slice_rows(out, 1, 1)?;
    let head_scores = weights
        .into_iter()
        .map(|w| g.slice_rows(w, 0, 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoolOutput {
        v_p,
        v_q,
        head_scores: Some(head_scores),
    })
}

#[derive(Clone, Debug)]
pub struct MsaParams {
    /// Learnable `1×C` class-token embedding.
    pub cls: Var,
    pub layers: Vec<AttentionBlock>,
}

/// Self-attention encoder over `[cls; query; bag]`; `v_p` is read at the
/// class-token position and `v_q` at the query position.
pub fn msa_pool(
    g: &mut Graph,
    query: Var,
    target: Var,
    params: &MsaParams,
    mask: &[bool],
) -> Result<PoolOutput> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateBag);
    }
    let mut seq = g.concat_rows(&[params.cls, query, target])?;
    let full_mask: Vec<bool> = [true, true].iter().chain(mask).copied().collect();
    for layer in &params.layers {
        seq = layer.apply(g, seq, seq, &full_mask)?.0;
    }
    Ok(PoolOutput {
        v_p: g.slice_rows(seq, 0, 1)?,
        v_q: g.slice_rows(seq, 1, 1)?,
        head_scores: None,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MinetParams {
    pub layer1: Linear,
    pub layer2: Linear,
}

/// Instance MLP followed by a masked element-wise max over the bag.
pub fn minet_pool(g: &mut Graph, target: Var, params: &MinetParams, mask: &[bool]) -> Result<Var> {
    let h = params.layer1.apply(g, target)?;
    let h = g.relu(h)?;
    let h = params.layer2.apply(g, h)?;
    let h = g.relu(h)?;
    g.masked_max_rows(h, mask)
}

/// Weighted-product similarity `Σ_i α_i · vQ_i · vP_i` → `1×1`.
pub fn siamese_similarity(g: &mut Graph, v_q: Var, v_p: Var, alpha: Var) -> Result<Var> {
    let weighted = g.mul(v_q, alpha)?;
    let vpt = g.transpose(v_p)?;
    g.matmul(weighted, vpt)
}

/// Max over per-instance similarities. Returns the logit and the implicit
/// argmax attention.
pub fn baseline_score(
    g: &mut Graph,
    query: Var,
    target: Var,
    alpha: Var,
    mask: &[bool],
) -> Result<(Var, Vec<f64>)> {
    let weighted = g.mul(target, alpha)?;
    let qt = g.transpose(query)?;
    let sims = g.matmul(weighted, qt)?;
    let logit = g.masked_max_rows(sims, mask)?;
    let weights = argmax_indicator(g.value(sims).data(), mask)?;
    Ok((logit, weights))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::attention::dba_constants;
    use crate::numcore::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn sce(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, d: usize, heads: usize) -> SceParams {
        SceParams {
            j: g.param(rand_tensor(rng, c, c)),
            j_bias: g.param(rand_tensor(rng, 1, c)),
            m: (0..heads)
                .map(|_| g.param(rand_tensor(rng, c, d)))
                .collect(),
            m_bias: (0..heads)
                .map(|_| g.param(rand_tensor(rng, 1, d)))
                .collect(),
        }
    }

    #[test]
    fn mhsce_zero_query_and_biases_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 4]));
        let p = SceParams {
            j: g.param(rand_tensor(&mut rng, 4, 4)),
            j_bias: g.param(Tensor::zeros(&[1, 4])),
            m: vec![g.param(rand_tensor(&mut rng, 4, 2))],
            m_bias: vec![g.param(Tensor::zeros(&[1, 2]))],
        };
        let gate = mhsce(&mut g, q, &p, 0).unwrap();
        assert_eq!(g.value(gate).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mhsce_matches_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, d) = (4, 2);
        let mut g = Graph::new();
        let qt = rand_tensor(&mut rng, 1, c);
        let q = g.constant(qt.clone());
        let p = sce(&mut g, &mut rng, c, d, 2);
        let gate = mhsce(&mut g, q, &p, 1).unwrap();
        let (j, jb, m, mb) = (
            g.value(p.j).clone(),
            g.value(p.j_bias).clone(),
            g.value(p.m[1]).clone(),
            g.value(p.m_bias[1]).clone(),
        );
        let hidden: Vec<f64> = (0..c)
            .map(|k| {
                let s: f64 = (0..c).map(|i| qt.get(0, i) * j.get(i, k)).sum();
                (s + jb.get(0, k)).max(0.0)
            })
            .collect();
        for k in 0..d {
            let s: f64 = (0..c).map(|i| hidden[i] * m.get(i, k)).sum();
            let want = sigmoid(s + mb.get(0, k));
            assert!((g.value(gate).get(0, k) - want).abs() < 1e-14);
        }

        // With J = 0 the gate no longer depends on the query.
        let mut g2 = Graph::new();
        let other = g2.constant(rand_tensor(&mut rng, 1, c));
        let zero_j = SceParams {
            j: g2.param(Tensor::zeros(&[c, c])),
            j_bias: g2.param(jb.clone()),
            m: vec![g2.param(m.clone())],
            m_bias: vec![g2.param(mb.clone())],
        };
        let q2 = g2.constant(qt);
        let a = mhsce(&mut g2, q2, &zero_j, 0).unwrap();
        let b = mhsce(&mut g2, other, &zero_j, 0).unwrap();
        assert_eq!(g2.value(a), g2.value(b));
    }

    fn dba(g: &mut Graph, d: usize, heads: usize, beta: f64) -> CapAttention {
        CapAttention::Dba {
            beta: (0..heads)
                .map(|_| g.param(Tensor::filled(&[1, d], beta)))
                .collect(),
            constants: dba_constants(d).unwrap(),
        }
    }

    #[test]
    fn cap_single_instance_bag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h) = (6, 2);
        let d = c / h;
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, 1, c));
        let xt = rand_tensor(&mut rng, 1, c);
        let x = g.constant(xt.clone());
        let w: Vec<Var> = (0..h)
            .map(|_| g.param(rand_tensor(&mut rng, c, d)))
            .collect();
        let attention = dba(&mut g, d, h, 1.0);
        let sce = sce(&mut g, &mut rng, c, d, h);
        let norms: Vec<LayerNormParams> = (0..h)
            .map(|_| LayerNormParams {
                scale: g.param(rand_tensor(&mut rng, 1, d)),
                shift: g.param(rand_tensor(&mut rng, 1, d)),
            })
            .collect();
        let params = CapParams {
            projections: Some(w.clone()),
            attention,
            sce: Some(sce.clone()),
            norm: CapNorm::PreAggregation(norms.clone()),
        };
        let out = cap_pool(&mut g, q, x, &params, &[true]).unwrap();
        for s in out.head_scores.as_ref().unwrap() {
            assert_eq!(g.value(*s).data(), &[1.0]);
        }
        let mut want = Vec::new();
        for j in 0..h {
            let proj = g.matmul(x, w[j]).unwrap();
            let gate = mhsce(&mut g, q, &sce, j).unwrap();
            let gated = g.mul(proj, gate).unwrap();
            let normed = norms[j].apply(&mut g, gated).unwrap();
            want.extend_from_slice(g.value(normed).data());
        }
        let got = g.value(out.v_p).data();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_flags_off_with_zero_beta_is_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 5;
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, 1, c));
        let xt = rand_tensor(&mut rng, 4, c);
        let x = g.constant(xt.clone());
        let params = CapParams {
            projections: None,
            attention: dba(&mut g, c, 1, 0.0),
            sce: None,
            norm: CapNorm::None,
        };
        let mask = [true, true, false, true];
        let out = cap_pool(&mut g, q, x, &params, &mask).unwrap();
        for k in 0..c {
            let mean = (xt.get(0, k) + xt.get(1, k) + xt.get(3, k)) / 3.0;
            assert!((g.value(out.v_p).get(0, k) - mean).abs() < 1e-12);
        }
        let s = g.value(out.head_scores.unwrap()[0]).data().to_vec();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15 && s[2] == 0.0);
    }

    #[test]
    fn sce_gate_multiplies_both_twins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let mut g = Graph::new();
        let qt = rand_tensor(&mut rng, 1, c);
        let xt = rand_tensor(&mut rng, 1, c);
        let q = g.constant(qt.clone());
        let x = g.constant(xt.clone());
        let params = CapParams {
            projections: None,
            attention: dba(&mut g, c, 1, 1.0),
            sce: Some(sce(&mut g, &mut rng, c, c, 1)),
            norm: CapNorm::None,
        };
        let out = cap_pool(&mut g, q, x, &params, &[true]).unwrap();
        for k in 0..c {
            let gate_p = g.value(out.v_p).get(0, k) / xt.get(0, k);
            let gate_q = g.value(out.v_q).get(0, k) / qt.get(0, k);
            assert!((gate_p - gate_q).abs() < 1e-12);
            assert!(gate_p > 0.0 && gate_p < 1.0);
        }
    }

    fn gabmil_params(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize) -> GatedAttentionParams {
        GatedAttentionParams {
            v: g.param(rand_tensor(rng, c, c)),
            u: g.param(rand_tensor(rng, c, c)),
            w: g.param(rand_tensor(rng, c, 1)),
        }
    }

    #[test]
    fn gabmil_identical_instances_and_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 3;
        let mut g = Graph::new();
        let p = gabmil_params(&mut g, &mut rng, c);
        let row = rand_tensor(&mut rng, 1, c);
        let same = Tensor::from_rows(&[row.data(), row.data(), row.data()]).unwrap();
        let q = g.constant(row.clone());
        let x = g.constant(same);
        let out = gabmil_pool(&mut g, q, x, &p, &[true; 3]).unwrap();
        assert!(g.value(out.v_p).max_abs_diff(&row) < 1e-12);
        assert_eq!(g.value(out.v_q), &row);

        let xt = rand_tensor(&mut rng, 4, c);
        let x = g.constant(xt.clone());
        let out = gabmil_pool(&mut g, q, x, &p, &[true; 4]).unwrap();
        let (v, u, w) = (
            g.value(p.v).clone(),
            g.value(p.u).clone(),
            g.value(p.w).clone(),
        );
        let logits: Vec<f64> = (0..4)
            .map(|n| {
                (0..c)
                    .map(|k| {
                        let a: f64 = (0..c).map(|i| xt.get(n, i) * v.get(i, k)).sum();
                        let b: f64 = (0..c).map(|i| xt.get(n, i) * u.get(i, k)).sum();
                        a.tanh() * sigmoid(b) * w.get(k, 0)
                    })
                    .sum()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..c {
            let want: f64 = (0..4).map(|n| e[n] / z * xt.get(n, k)).sum();
            assert!((g.value(out.v_p).get(0, k) - want).abs() < 1e-12);
        }
    }

    fn linear(g: &mut Graph, rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear {
        Linear {
            weight: g.param(rand_tensor(rng, i, o)),
            bias: g.param(rand_tensor(rng, 1, o)),
        }
    }

    fn block(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, heads: usize) -> AttentionBlock {
        let d = c / heads;
        let ln = |g: &mut Graph| LayerNormParams {
            scale: g.param(Tensor::ones(&[1, c])),
            shift: g.param(Tensor::zeros(&[1, c])),
        };
        let ln1 = ln(g);
        let ln2 = ln(g);
        AttentionBlock {
            mha: MhaParams {
                query: (0..heads).map(|_| linear(g, rng, c, d)).collect(),
                key: (0..heads).map(|_| linear(g, rng, c, d)).collect(),
                value: (0..heads).map(|_| linear(g, rng, c, d)).collect(),
                output: linear(g, rng, c, c),
            },
            ln1,
            ff: FeedForward {
                hidden: linear(g, rng, c, c),
                output: linear(g, rng, c, c),
            },
            ln2,
        }
    }

    #[test]
    fn pma_single_instance_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let mut g = Graph::new();
        let p = PmaParams {
            seed: g.param(rand_tensor(&mut rng, 1, c)),
            block: block(&mut g, &mut rng, c, 2),
        };
        let q = g.constant(rand_tensor(&mut rng, 1, c));
        let x = g.constant(rand_tensor(&mut rng, 1, c));
        let out = pma_pool(&mut g, q, x, &p, &[true]).unwrap();
        for s in out.head_scores.unwrap() {
            assert_eq!(g.value(s).data(), &[1.0]);
        }
    }

    #[test]
    fn msa_is_invariant_to_bag_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 4;
        let mut g = Graph::new();
        let p = MsaParams {
            cls: g.param(rand_tensor(&mut rng, 1, c)),
            layers: (0..2).map(|_| block(&mut g, &mut rng, c, 2)).collect(),
        };
        let q = g.constant(rand_tensor(&mut rng, 1, c));
        let xt = rand_tensor(&mut rng, 3, c);
        let rev = Tensor::from_rows(&[xt.row_slice(2), xt.row_slice(1), xt.row_slice(0)]).unwrap();
        let x1 = g.constant(xt);
        let x2 = g.constant(rev);
        let a = msa_pool(&mut g, q, x1, &p, &[true; 3]).unwrap();
        let b = msa_pool(&mut g, q, x2, &p, &[true; 3]).unwrap();
        assert!(g.value(a.v_p).max_abs_diff(g.value(b.v_p)) < 1e-12);
        assert!(g.value(a.v_q).max_abs_diff(g.value(b.v_q)) < 1e-12);
        assert!(a.head_scores.is_none());
    }

    #[test]
    fn minet_duplicate_rows_do_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 4;
        let mut g = Graph::new();
        let p = MinetParams {
            layer1: linear(&mut g, &mut rng, c, c),
            layer2: linear(&mut g, &mut rng, c, c),
        };
        let xt = rand_tensor(&mut rng, 2, c);
        let dup = Tensor::from_rows(&[xt.row_slice(0), xt.row_slice(1), xt.row_slice(1)]).unwrap();
        let x1 = g.constant(xt);
        let x2 = g.constant(dup);
        let a = minet_pool(&mut g, x1, &p, &[true; 2]).unwrap();
        let b = minet_pool(&mut g, x2, &p, &[true; 3]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn baseline_reference_cases() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![1.0, 0.0]));
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let alpha = g.param(Tensor::ones(&[1, 2]));
        let (logit, w) = baseline_score(&mut g, q, x, alpha, &[true, true]).unwrap();
        assert_eq!(g.value(logit).item(), 1.0);
        assert_eq!(w, vec![1.0, 0.0]);

        let x = g.constant(Tensor::from_rows(&[[1.0, 5.0], [1.0, -3.0], [1.0, 0.0]]).unwrap());
        let (logit, w) = baseline_score(&mut g, q, x, alpha, &[true; 3]).unwrap();
        assert_eq!(g.value(logit).item(), 1.0);
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }
}
