//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every operation appends a node to the [`Graph`]; node indices are therefore
//! already in topological order and [`Graph::backward`] simply walks the tape
//! in reverse, accumulating vector-Jacobian products.
//!
//! Binary element-wise operations accept either two tensors of the same shape
//! or a right-hand `1×C` row that is broadcast over every row of the left-hand
//! side.

use std::rc::Rc;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    MaskedSoftmax(Var, Rc<[bool]>),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedVariance(Var, Rc<[bool]>),
    MaskedMaxRows(Var, Vec<usize>),
    MaskedMeanRows(Var, Rc<[bool]>),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    BceWithLogits(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// A single-threaded computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_mask(mask: &[bool], n: usize, op: &'static str) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Shape {
            op,
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateBag);
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Clamp(a, _, _)
            | Op::MaskedSoftmax(a, _)
            | Op::MaskedVariance(a, _)
            | Op::MaskedMaxRows(a, _)
            | Op::MaskedMeanRows(a, _)
            | Op::Sum(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::BceWithLogits(a, _) => self.rg(*a),
            Op::LayerNorm {
                x, scale, shift, ..
            } => self.rg(*x) || self.rg(*scale) || self.rg(*shift),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, p) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, p],
            });
        }
        let mut out = vec![0.0; m * p];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            p,
        );
        self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), "transpose")
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar == br && ac == bc {
            Ok(Broadcast::Same)
        } else if br == 1 && ac == bc {
            Ok(Broadcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            })
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let bc = self.broadcast_kind(a, b, name)?;
        let (r, c) = self.shape(a);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => av
                .chunks(c)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        Ok((Tensor::new(vec![r, c], data)?, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b, bc), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b, bc), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b, bc), "mul")
    }

    /// `scale · a + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a).map(|x| scale * x + shift);
        self.push(t, Op::Affine(a, scale), "affine")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), "tanh")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), "abs")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Softmax along the last axis restricted to `mask`; masked positions are
    /// exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_mask(mask, c, "masked_softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for (row, orow) in x.chunks(c).zip(out.chunks_mut(c)) {
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ((o, &v), &m) in orow.iter_mut().zip(row).zip(mask) {
                if m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        self.push(t, Op::MaskedSoftmax(a, mask.into()), "masked_softmax")
    }

    /// Row-wise layer normalization (population variance) followed by the
    /// affine `scale`/`shift`, both `1×D`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.shape(x);
        for p in [scale, shift] {
            let (pr, pc) = self.shape(p);
            if pr != 1 || pc != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![r, d],
                    rhs: vec![pr, pc],
                });
            }
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let bv = self.value(shift).data();
        let mut normalized = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let n = (row[j] - mean) * inv;
                normalized[i * d + j] = n;
                out[i * d + j] = n * sv[j] + bv[j];
            }
        }
        let t = Tensor::new(vec![r, d], out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Population variance over the valid rows of an `N×C` tensor → `1×C`.
    pub fn masked_variance(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_mask(mask, r, "masked_variance")?;
        let x = self.value(a);
        let n = mask.iter().filter(|&&m| m).count() as f64;
        let mut out = vec![0.0; c];
        for (j, o) in out.iter_mut().enumerate() {
            let mean = (0..r)
                .filter(|&i| mask[i])
                .map(|i| x.get(i, j))
                .sum::<f64>()
                / n;
            *o = (0..r)
                .filter(|&i| mask[i])
                .map(|i| (x.get(i, j) - mean).powi(2))
                .sum::<f64>()
                / n;
        }
        self.push(
            Tensor::row(out),
            Op::MaskedVariance(a, mask.into()),
            "masked_variance",
        )
    }

    /// Column-wise maximum over valid rows → `1×C`. The first maximal row
    /// receives the gradient.
    pub fn masked_max_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_mask(mask, r, "masked_max_rows")?;
        let x = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for i in (0..r).filter(|&i| mask[i]) {
            for j in 0..c {
                let v = x.get(i, j);
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(
            Tensor::row(out),
            Op::MaskedMaxRows(a, arg),
            "masked_max_rows",
        )
    }

    /// Mean over valid rows → `1×C`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_mask(mask, r, "masked_mean_rows")?;
        let x = self.value(a);
        let n = mask.iter().filter(|&&m| m).count() as f64;
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| mask[i]) {
            for (o, &v) in out.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        self.push(
            Tensor::row(out),
            Op::MaskedMeanRows(a, mask.into()),
            "masked_mean_rows",
        )
    }

    /// Sum of all elements → `1×1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr],
                });
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::new(vec![r, cols], out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.row_slice(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        self.push(t, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![c],
                    rhs: vec![pc],
                });
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        self.push(t, Op::SliceRows(a, start), "slice_rows")
    }

    /// Binary cross-entropy of a `1×1` logit against `label`, evaluated in
    /// logit space.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var> {
        let (r, c) = self.shape(logit);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "bce_with_logits expects a scalar logit, got {r}x{c}"
            )));
        }
        let z = self.value(logit).item();
        let loss = z.max(0.0) - label * z + (-z.abs()).exp().ln_1p();
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logit, label),
            "bce_with_logits",
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    fn reduce_broadcast(&self, dy: &[f64], b: Var, bc: Broadcast) -> Vec<f64> {
        match bc {
            Broadcast::Same => dy.to_vec(),
            Broadcast::Row => {
                let c = self.shape(b).1;
                let mut out = vec![0.0; c];
                for row in dy.chunks(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = dy.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let p = self.shape(*b).1;
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let bt = self.value(*b).transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, p, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY
                    let at = self.value(*a).transpose();
                    let mut db = vec![0.0; k * p];
                    matmul_into(at.data(), g, &mut db, k, m, p);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let back = dy.transpose();
                self.accumulate(grads, *a, back.into_data());
            }
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let db = self.reduce_broadcast(g, *b, *bc);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let db = self.reduce_broadcast(g, *b, *bc);
                    self.accumulate(grads, *b, db.into_iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = self.shape(*a).1;
                if self.rg(*a) {
                    let da = match bc {
                        Broadcast::Same => g.iter().zip(bv).map(|(d, b)| d * b).collect(),
                        Broadcast::Row => g
                            .chunks(c)
                            .flat_map(|row| row.iter().zip(bv).map(|(d, b)| d * b))
                            .collect(),
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(d, a)| d * a).collect();
                    let db = self.reduce_broadcast(&prod, *b, *bc);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|d| d * s).collect());
            }
            Op::Sigmoid(a) => {
                let da = g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| match x.partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => *d,
                        Some(std::cmp::Ordering::Less) => -d,
                        _ => 0.0,
                    })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| if x > *lo && x < *hi { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::MaskedSoftmax(a, mask) => {
                let c = self.shape(*a).1;
                let mut da = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(c).zip(y.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = grow
                        .iter()
                        .zip(yrow)
                        .zip(mask.iter())
                        .filter(|(_, &m)| m)
                        .map(|((d, s), _)| d * s)
                        .sum();
                    for j in 0..c {
                        if mask[j] {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let (r, d) = self.shape(*x);
                let sv = self.value(*scale).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * d];
                    for i in 0..r {
                        let gr = &g[i * d..(i + 1) * d];
                        let nr = &normalized[i * d..(i + 1) * d];
                        let dn: Vec<f64> = gr.iter().zip(sv).map(|(g, s)| g * s).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                        let k = inv_std[i] / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = k * (d as f64 * dn[j] - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*scale) {
                    let mut ds = vec![0.0; d];
                    for (gr, nr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            ds[j] += gr[j] * nr[j];
                        }
                    }
                    self.accumulate(grads, *scale, ds);
                }
                if self.rg(*shift) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *shift, db);
                }
            }
            Op::MaskedVariance(a, mask) => {
                let xt = self.value(*a);
                let (r, c) = (xt.rows(), xt.cols());
                let n = mask.iter().filter(|&&m| m).count() as f64;
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    let mean = (0..r)
                        .filter(|&i| mask[i])
                        .map(|i| xt.get(i, j))
                        .sum::<f64>()
                        / n;
                    for i in (0..r).filter(|&i| mask[i]) {
                        da[i * c + j] = g[j] * 2.0 * (xt.get(i, j) - mean) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::MaskedMaxRows(a, arg) => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for (j, &i) in arg.iter().enumerate() {
                    da[i * c + j] = g[j];
                }
                self.accumulate(grads, *a, da);
            }
            Op::MaskedMeanRows(a, mask) => {
                let (r, c) = self.shape(*a);
                let n = mask.iter().filter(|&&m| m).count() as f64;
                let mut da = vec![0.0; r * c];
                for i in (0..r).filter(|&i| mask[i]) {
                    for j in 0..c {
                        da[i * c + j] = g[j] / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(pr * pc);
                        for i in 0..pr {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + pc]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let len = dy.cols();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *a, da);
            }
            Op::BceWithLogits(a, label) => {
                let z = self.value(*a).item();
                self.accumulate(grads, *a, vec![g[0] * (sigmoid(z) - label)]);
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let sel = g.constant(Tensor::row(vec![1.0, 0.0]));
        let col = g.constant(Tensor::from_rows(&[[7.5], [-2.0]]).unwrap());
        let s = g.matmul(sel, col).unwrap();
        assert_eq!(g.value(s).item(), 7.5);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![5.0, 5.0, 5.0]));
        let s = g.masked_softmax(a, &[true; 3]).unwrap();
        for &v in g.value(s).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }

        let a = g.constant(Tensor::row(vec![0.0, 2f64.ln()]));
        let s = g.masked_softmax(a, &[true, true]).unwrap();
        assert!(close(g.value(s).data()[0], 1.0 / 3.0, 1e-15));
        assert!(close(g.value(s).data()[1], 2.0 / 3.0, 1e-15));

        let a = g.constant(Tensor::row(vec![9.0, 1.0, 4.0]));
        let s = g.masked_softmax(a, &[true, false, true]).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[1], 0.0);
        assert!(close(v[0] + v[2], 1.0, 1e-15));
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(
            g.masked_softmax(a, &[false, false]),
            Err(Error::DegenerateBag)
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::ones(&[1, 3]));
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let x = g.constant(Tensor::row(vec![3.0, 3.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::row(vec![2.0, 4.0, 6.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        // population variance 8/3; (x - 4) / sqrt(8/3) = [-√1.5, 0, √1.5]
        let expect = [-(1.5f64).sqrt(), 0.0, 1.5f64.sqrt()];
        for (v, e) in g.value(y).data().iter().zip(expect) {
            assert!(close(*v, e, 1e-5));
        }

        let one2 = g.constant(Tensor::ones(&[1, 2]));
        let zero2 = g.constant(Tensor::zeros(&[1, 2]));
        let x = g.constant(Tensor::row(vec![1.0, -1.0]));
        let y = g.layer_norm(x, one2, zero2, 1e-14).unwrap();
        assert!(close(g.value(y).data()[0], 1.0, 1e-12));
        assert!(close(g.value(y).data()[1], -1.0, 1e-12));
    }

    #[test]
    fn variance_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 5.0], [1.0, 5.0]]).unwrap());
        let v = g.masked_variance(x, &[true, true]).unwrap();
        assert_eq!(g.value(v).data(), &[0.0, 0.0]);

        let x = g.constant(Tensor::from_rows(&[[0.0], [2.0]]).unwrap());
        let v = g.masked_variance(x, &[true, true]).unwrap();
        assert_eq!(g.value(v).item(), 1.0);

        assert!(matches!(
            g.masked_variance(x, &[false, false]),
            Err(Error::DegenerateBag)
        ));
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sigmoid(x).unwrap();
        let root = g.sum(s).unwrap();
        let grads = g.backward(root).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let s = g.sigmoid(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let detached = g.param(Tensor::row(vec![3.0, 4.0]));
        let root = g.sum(x).unwrap();
        let grads = g.backward(root).unwrap();
        assert!(grads.get(detached).is_none());
        assert_eq!(grads.wrt(detached).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1e308]));
        assert!(matches!(g.affine(x, 10.0, 0.0), Err(Error::NonFinite(_))));
    }
}
