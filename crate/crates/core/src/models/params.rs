use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{LayerNormPlacement, ModelConfig, Variant};
use crate::attention::{dba_constants, GatedAttentionParams};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::pooling::{
    AttentionBlock, CapAttention, CapNorm, CapParams, FeedForward, LayerNormParams, Linear,
    MhaParams, MinetParams, MsaParams, PmaParams, SceParams,
};

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Glorot,
    Normal(f64),
}

struct Decl {
    name: String,
    shape: [usize; 2],
    init: Init,
}

fn decl(out: &mut Vec<Decl>, name: impl Into<String>, shape: [usize; 2], init: Init) {
    out.push(Decl {
        name: name.into(),
        shape,
        init,
    });
}

fn layer_norm_decl(out: &mut Vec<Decl>, prefix: &str, width: usize) {
    decl(out, format!("{prefix}.scale"), [1, width], Init::Ones);
    decl(out, format!("{prefix}.shift"), [1, width], Init::Zeros);
}

fn linear_decl(out: &mut Vec<Decl>, prefix: &str, fan_in: usize, fan_out: usize) {
    decl(out, format!("{prefix}.w"), [fan_in, fan_out], Init::Glorot);
    decl(out, format!("{prefix}.b"), [1, fan_out], Init::Zeros);
}

fn block_decl(out: &mut Vec<Decl>, prefix: &str, c: usize, heads: usize, ff_width: usize) {
    let d = c / heads;
    for j in 0..heads {
        for part in ["q", "k", "v"] {
            linear_decl(out, &format!("{prefix}.mha.{part}.{j}"), c, d);
        }
    }
    linear_decl(out, &format!("{prefix}.mha.o"), c, c);
    layer_norm_decl(out, &format!("{prefix}.ln1"), c);
    linear_decl(out, &format!("{prefix}.ff.hidden"), c, ff_width);
    linear_decl(out, &format!("{prefix}.ff.out"), ff_width, c);
    layer_norm_decl(out, &format!("{prefix}.ln2"), c);
}

/// Ordered list of every learnable tensor for `cfg`. Initialization draws
/// follow this order.
fn layout(cfg: &ModelConfig) -> Vec<Decl> {
    let c = cfg.channels;
    let mut out = Vec::new();
    decl(&mut out, "alpha", [1, c], Init::Ones);
    layer_norm_decl(&mut out, "input_ln", c);
    match cfg.variant {
        Variant::Baseline => {}
        Variant::Gabmil => {
            decl(&mut out, "gabmil.v", [c, c], Init::Glorot);
            decl(&mut out, "gabmil.u", [c, c], Init::Glorot);
            decl(&mut out, "gabmil.w", [c, 1], Init::Glorot);
        }
        Variant::Pma => {
            decl(
                &mut out,
                "pma.seed",
                [1, c],
                Init::Normal(1.0 / (c as f64).sqrt()),
            );
            block_decl(&mut out, "pma.block", c, cfg.heads, c);
        }
        Variant::Msa => {
            decl(
                &mut out,
                "msa.cls",
                [1, c],
                Init::Normal(1.0 / (c as f64).sqrt()),
            );
            for l in 0..2 {
                block_decl(&mut out, &format!("msa.layer{l}"), c, cfg.heads, 2 * c);
            }
        }
        Variant::Minet => {
            linear_decl(&mut out, "minet.layer1", c, c);
            linear_decl(&mut out, "minet.layer2", c, c);
        }
        Variant::CapVema | Variant::CapDba => {
            let h = cfg.effective_heads();
            let d = cfg.head_dim();
            if cfg.multihead {
                for j in 0..h {
                    decl(&mut out, format!("cap.w.{j}"), [c, d], Init::Glorot);
                }
            }
            if cfg.variant == Variant::CapVema {
                decl(&mut out, "cap.vema.r", [c, c], Init::Glorot);
                decl(&mut out, "cap.vema.r_bias", [1, c], Init::Zeros);
                for j in 0..h {
                    decl(&mut out, format!("cap.vema.s.{j}"), [c, d], Init::Glorot);
                    decl(
                        &mut out,
                        format!("cap.vema.s_bias.{j}"),
                        [1, d],
                        Init::Zeros,
                    );
                }
            } else {
                for j in 0..h {
                    decl(&mut out, format!("cap.dba.beta.{j}"), [1, d], Init::Ones);
                }
            }
            if cfg.sce {
                decl(&mut out, "cap.sce.j", [c, c], Init::Glorot);
                decl(&mut out, "cap.sce.j_bias", [1, c], Init::Zeros);
                for j in 0..h {
                    decl(&mut out, format!("cap.sce.m.{j}"), [c, d], Init::Glorot);
                    decl(&mut out, format!("cap.sce.m_bias.{j}"), [1, d], Init::Zeros);
                }
            }
            match cfg.layernorm {
                LayerNormPlacement::PreAggregation => {
                    for j in 0..h {
                        layer_norm_decl(&mut out, &format!("cap.ln.{j}"), d);
                    }
                }
                LayerNormPlacement::PostAggregation => {
                    layer_norm_decl(&mut out, "cap.post_ln", c);
                }
                LayerNormPlacement::None => {}
            }
        }
    }
    out
}

/// Every learnable tensor of one model, keyed by a stable dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tensors = BTreeMap::new();
        for d in layout(cfg) {
            let [r, c] = d.shape;
            let data: Vec<f64> = match d.init {
                Init::Zeros => vec![0.0; r * c],
                Init::Ones => vec![1.0; r * c],
                Init::Glorot => {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit)
                        .map_err(|e| Error::Config(e.to_string()))?;
                    (0..r * c).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..r * c).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            tensors.insert(d.name, Tensor::new(vec![r, c], data)?);
        }
        Ok(Self { tensors })
    }

    /// Checks that `tensors` carries exactly the names and shapes `cfg` needs.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = layout(cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for d in &expected {
            let t = tensors
                .get(&d.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", d.name)))?;
            if t.shape() != d.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// `self += scale · other`, matched by name.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (k, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

/// Graph handles for a bound [`ModelParams`].
pub(crate) struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub(crate) fn new(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.get(&format!("{prefix}.w"))?,
            bias: self.get(&format!("{prefix}.b"))?,
        })
    }

    fn layer_norm(&self, prefix: &str) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            scale: self.get(&format!("{prefix}.scale"))?,
            shift: self.get(&format!("{prefix}.shift"))?,
        })
    }

    fn per_head(&self, prefix: &str, heads: usize) -> Result<Vec<Var>> {
        (0..heads)
            .map(|j| self.get(&format!("{prefix}.{j}")))
            .collect()
    }

    fn block(&self, prefix: &str, heads: usize) -> Result<AttentionBlock> {
        let lin = |part: &str| -> Result<Vec<Linear>> {
            (0..heads)
                .map(|j| self.linear(&format!("{prefix}.mha.{part}.{j}")))
                .collect()
        };
        Ok(AttentionBlock {
            mha: MhaParams {
                query: lin("q")?,
                key: lin("k")?,
                value: lin("v")?,
                output: self.linear(&format!("{prefix}.mha.o"))?,
            },
            ln1: self.layer_norm(&format!("{prefix}.ln1"))?,
            ff: FeedForward {
                hidden: self.linear(&format!("{prefix}.ff.hidden"))?,
                output: self.linear(&format!("{prefix}.ff.out"))?,
            },
            ln2: self.layer_norm(&format!("{prefix}.ln2"))?,
        })
    }

    pub(crate) fn input_ln(&self) -> Result<LayerNormParams> {
        self.layer_norm("input_ln")
    }

    pub(crate) fn gabmil(&self) -> Result<GatedAttentionParams> {
        Ok(GatedAttentionParams {
            v: self.get("gabmil.v")?,
            u: self.get("gabmil.u")?,
            w: self.get("gabmil.w")?,
        })
    }

    pub(crate) fn pma(&self, cfg: &ModelConfig) -> Result<PmaParams> {
        Ok(PmaParams {
            seed: self.get("pma.seed")?,
            block: self.block("pma.block", cfg.heads)?,
        })
    }

    pub(crate) fn msa(&self, cfg: &ModelConfig) -> Result<MsaParams> {
        Ok(MsaParams {
            cls: self.get("msa.cls")?,
            layers: (0..2)
                .map(|l| self.block(&format!("msa.layer{l}"), cfg.heads))
                .collect::<Result<_>>()?,
        })
    }

    pub(crate) fn minet(&self) -> Result<MinetParams> {
        Ok(MinetParams {
            layer1: self.linear("minet.layer1")?,
            layer2: self.linear("minet.layer2")?,
        })
    }

    pub(crate) fn cap(&self, cfg: &ModelConfig) -> Result<CapParams> {
        let h = cfg.effective_heads();
        let projections = if cfg.multihead {
            Some(self.per_head("cap.w", h)?)
        } else {
            None
        };
        let attention = match cfg.variant {
            Variant::CapVema => CapAttention::Vema {
                r: self.get("cap.vema.r")?,
                r_bias: self.get("cap.vema.r_bias")?,
                s: self.per_head("cap.vema.s", h)?,
                s_bias: self.per_head("cap.vema.s_bias", h)?,
            },
            Variant::CapDba => CapAttention::Dba {
                beta: self.per_head("cap.dba.beta", h)?,
                constants: dba_constants(cfg.head_dim())?,
            },
            other => {
                return Err(Error::Contract(format!(
                    "{other} is not a cross-attention variant"
                )))
            }
        };
        let sce = if cfg.sce {
            Some(SceParams {
                j: self.get("cap.sce.j")?,
                j_bias: self.get("cap.sce.j_bias")?,
                m: self.per_head("cap.sce.m", h)?,
                m_bias: self.per_head("cap.sce.m_bias", h)?,
            })
        } else {
            None
        };
        let norm = match cfg.layernorm {
            LayerNormPlacement::PreAggregation => CapNorm::PreAggregation(
                (0..h)
                    .map(|j| self.layer_norm(&format!("cap.ln.{j}")))
                    .collect::<Result<_>>()?,
            ),
            LayerNormPlacement::PostAggregation => {
                CapNorm::PostAggregation(self.layer_norm("cap.post_ln")?)
            }
            LayerNormPlacement::None => CapNorm::None,
        };
        Ok(CapParams {
            projections,
            attention,
            sce,
            norm,
        })
    }
}
