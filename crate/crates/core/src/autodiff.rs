//! Reverse-mode automatic differentiation over [`Tensor`] matrices.
//!
//! Nodes are reference counted and only keep their parents alive when the
//! output requires a gradient, so inference passes built from constants free
//! intermediate activations as soon as they go out of scope. Node ids are
//! allocated monotonically, which makes descending-id order a valid reverse
//! topological order for the backward sweep.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct Var<S: Scalar>(Rc<Node<S>>);

struct Node<S: Scalar> {
    id: usize,
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(Var<S>, Var<S>),
    AddBias(Var<S>, Var<S>),
    Add(Var<S>, Var<S>),
    Scale(Var<S>, S),
    Relu(Var<S>),
    LayerNorm {
        x: Var<S>,
        gamma: Var<S>,
        beta: Var<S>,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
    },
    Attention {
        qkv: Var<S>,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    Assemble(Vec<(Var<S>, usize)>),
    Standardize {
        x: Var<S>,
        seq: usize,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
    },
    PositionAffine {
        x: Var<S>,
        seq: usize,
        scale: Vec<S>,
    },
    AddPositional {
        x: Var<S>,
        pos: Var<S>,
    },
    CrossEntropy {
        logits: Var<S>,
        probs: Tensor<S>,
        labels: Vec<usize>,
        batch: usize,
    },
    WeightedSum(Var<S>, Tensor<S>),
}

impl<S: Scalar> Op<S> {
    fn inputs(&self) -> Vec<&Var<S>> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::WeightedSum(a, _) => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { qkv, .. } => vec![qkv],
            Op::Assemble(parts) => parts.iter().map(|(v, _)| v).collect(),
            Op::Standardize { x, .. } | Op::PositionAffine { x, .. } => vec![x],
            Op::AddPositional { x, pos } => vec![x, pos],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

/// Per-position statistics observed by [`Var::standardize_positions`].
#[derive(Clone, Debug, PartialEq)]
pub struct PositionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl<S: Scalar> Var<S> {
    fn make(value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Self {
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
        }))
    }

    /// A value that never receives a gradient (inputs, noise, frozen weights).
    pub fn constant(value: Tensor<S>) -> Self {
        Self::make(value, false, Op::Leaf)
    }

    /// A trainable leaf; its gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor<S>) -> Self {
        Self::make(value, true, Op::Leaf)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.0.value
    }

    pub fn shape(&self) -> [usize; 2] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn matmul(&self, w: &Var<S>) -> Var<S> {
        let value = self.value().matmul(w.value(), false, false);
        let rg = self.requires_grad() || w.requires_grad();
        Self::make(value, rg, Op::MatMul(self.clone(), w.clone()))
    }

    /// Adds a `1 x cols` bias row to every row.
    pub fn add_bias(&self, bias: &Var<S>) -> Var<S> {
        let b = bias.value();
        assert_eq!(b.shape(), [1, self.shape()[1]], "bias shape");
        let mut value = self.value().clone();
        let cols = value.cols();
        for r in 0..value.rows() {
            for (v, &bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        debug_assert_eq!(cols, b.cols());
        let rg = self.requires_grad() || bias.requires_grad();
        Self::make(value, rg, Op::AddBias(self.clone(), bias.clone()))
    }

    pub fn add(&self, other: &Var<S>) -> Var<S> {
        assert_eq!(self.shape(), other.shape(), "add shape");
        let mut value = self.value().clone();
        value.add_assign(other.value());
        let rg = self.requires_grad() || other.requires_grad();
        Self::make(value, rg, Op::Add(self.clone(), other.clone()))
    }

    pub fn scale(&self, s: S) -> Var<S> {
        let value = self.value().map(|v| v * s);
        Self::make(value, self.requires_grad(), Op::Scale(self.clone(), s))
    }

    pub fn relu(&self) -> Var<S> {
        let value = self.value().map(|v| if v > S::zero() { v } else { S::zero() });
        Self::make(value, self.requires_grad(), Op::Relu(self.clone()))
    }

    /// Layer normalization over the columns of every row.
    pub fn layer_norm(&self, gamma: &Var<S>, beta: &Var<S>) -> Var<S> {
        let x = self.value();
        let (n, d) = (x.rows(), x.cols());
        let eps = S::from_f64_lossy(LAYER_NORM_EPS);
        let dn = S::from_usize(d).unwrap();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * inv;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * gamma.value().data()[c] + beta.value().data()[c];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Self::make(
            out,
            rg,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        )
    }

    /// Unmasked multi-head scaled dot-product self-attention.
    ///
    /// `self` holds the packed `[q | k | v]` projections, `n x 3d`, with rows
    /// grouped into consecutive sequences of length `seq`. Returns the
    /// concatenated head outputs, `n x d`.
    pub fn self_attention(&self, seq: usize, heads: usize) -> Var<S> {
        let qkv = self.value();
        let n = qkv.rows();
        assert_eq!(qkv.cols() % 3, 0, "qkv width");
        let d = qkv.cols() / 3;
        assert!(seq > 0 && n.is_multiple_of(seq), "rows must split into sequences");
        assert_eq!(d % heads, 0, "heads must divide model width");
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let n_seq = n / seq;
        let w3 = 3 * d;
        let src = qkv.data();
        let mut out = Tensor::zeros(n, d);
        let mut probs = vec![S::zero(); n_seq * heads * seq * seq];
        let mut scores = vec![S::zero(); seq];
        {
            let od = out.data_mut();
            for s in 0..n_seq {
                let base = s * seq;
                for h in 0..heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    for i in 0..seq {
                        let q = &src[(base + i) * w3 + qo..(base + i) * w3 + qo + dh];
                        for (j, sc) in scores.iter_mut().enumerate() {
                            let k = &src[(base + j) * w3 + ko..(base + j) * w3 + ko + dh];
                            let dot: S = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                            *sc = dot * scale;
                        }
                        softmax_in_place(&mut scores);
                        let p_off = ((s * heads + h) * seq + i) * seq;
                        probs[p_off..p_off + seq].copy_from_slice(&scores);
                        let o = &mut od[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                        for (j, &p) in scores.iter().enumerate() {
                            let v = &src[(base + j) * w3 + vo..(base + j) * w3 + vo + dh];
                            for t in 0..dh {
                                o[t] = o[t] + p * v[t];
                            }
                        }
                    }
                }
            }
        }
        Self::make(
            out,
            self.requires_grad(),
            Op::Attention {
                qkv: self.clone(),
                seq,
                heads,
                probs,
            },
        )
    }

    /// Places each part's columns at the given column offset of a zero matrix
    /// of width `width`. All parts must share the row count `rows`.
    pub fn assemble(rows: usize, width: usize, parts: &[(Var<S>, usize)]) -> Var<S> {
        let mut value = Tensor::zeros(rows, width);
        for (part, off) in parts {
            let pv = part.value();
            assert_eq!(pv.rows(), rows, "assemble row count");
            assert!(off + pv.cols() <= width, "assemble part exceeds width");
            for r in 0..rows {
                value.row_mut(r)[*off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
        }
        let rg = parts.iter().any(|(p, _)| p.requires_grad());
        Self::make(value, rg, Op::Assemble(parts.to_vec()))
    }

    /// Standardizes every `(position, column)` across the batch using the
    /// population mean and standard deviation. Rows are `batch x seq`,
    /// message-major.
    pub fn standardize_positions(&self, seq: usize) -> Result<(Var<S>, PositionStats)> {
        let x = self.value();
        let (n, c) = (x.rows(), x.cols());
        if seq == 0 || n % seq != 0 {
            return Err(Error::shape("standardize", format!("rows divisible by {seq}"), n));
        }
        let batch = n / seq;
        if batch < 2 {
            return Err(Error::InvalidArgument(
                "batch power normalization needs at least 2 messages".into(),
            ));
        }
        let bn = S::from_usize(batch).unwrap();
        let mut xhat = Tensor::zeros(n, c);
        let mut inv_std = vec![S::zero(); seq * c];
        let mut stats = PositionStats {
            mean: vec![0.0; seq * c],
            std: vec![0.0; seq * c],
        };
        for i in 0..seq {
            for col in 0..c {
                let mut mean = S::zero();
                for b in 0..batch {
                    mean = mean + x.get(b * seq + i, col);
                }
                mean = mean / bn;
                let mut var = S::zero();
                for b in 0..batch {
                    let dv = x.get(b * seq + i, col) - mean;
                    var = var + dv * dv;
                }
                var = var / bn;
                if !(var > S::zero()) || !var.is_finite() {
                    return Err(Error::Numerical(format!(
                        "zero or non-finite batch variance at position {i} (variance {var})"
                    )));
                }
                let std = var.sqrt();
                let inv = S::one() / std;
                inv_std[i * c + col] = inv;
                stats.mean[i * c + col] = mean.as_f64();
                stats.std[i * c + col] = std.as_f64();
                for b in 0..batch {
                    let r = b * seq + i;
                    xhat.set(r, col, (x.get(r, col) - mean) * inv);
                }
            }
        }
        let value = xhat.clone();
        let out = Self::make(
            value,
            self.requires_grad(),
            Op::Standardize {
                x: self.clone(),
                seq,
                xhat,
                inv_std,
            },
        );
        Ok((out, stats))
    }

    /// `(x - shift[pos]) * scale[pos]` with constants per `(position, column)`.
    pub fn position_affine(&self, seq: usize, shift: &[S], scale: &[S]) -> Var<S> {
        let x = self.value();
        let (n, c) = (x.rows(), x.cols());
        assert_eq!(shift.len(), seq * c);
        assert_eq!(scale.len(), seq * c);
        let mut value = x.clone();
        for r in 0..n {
            let i = r % seq;
            for (col, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = (*v - shift[i * c + col]) * scale[i * c + col];
            }
        }
        Self::make(
            value,
            self.requires_grad(),
            Op::PositionAffine {
                x: self.clone(),
                seq,
                scale: scale.to_vec(),
            },
        )
    }

    /// Adds row `r % seq` of `pos` (`seq x cols`) to row `r`.
    pub fn add_positional(&self, pos: &Var<S>) -> Var<S> {
        let seq = pos.shape()[0];
        assert_eq!(pos.shape()[1], self.shape()[1], "positional width");
        let mut value = self.value().clone();
        for r in 0..value.rows() {
            let p = pos.value().row(r % seq);
            for (v, &pv) in value.row_mut(r).iter_mut().zip(p) {
                *v = *v + pv;
            }
        }
        let rg = self.requires_grad() || pos.requires_grad();
        Self::make(
            value,
            rg,
            Op::AddPositional {
                x: self.clone(),
                pos: pos.clone(),
            },
        )
    }

    /// Softmax cross-entropy of every row against its label, summed over rows
    /// and divided by `batch`. Returns a `1 x 1` value.
    pub fn cross_entropy(&self, labels: &[usize], batch: usize) -> Var<S> {
        let logits = self.value();
        assert_eq!(labels.len(), logits.rows(), "one label per row");
        let probs = logits.softmax_rows();
        let mut total = S::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total = total + (lse - row[y]);
        }
        let value = Tensor::scalar(total / S::from_usize(batch).unwrap());
        Self::make(
            value,
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.clone(),
                probs,
                labels: labels.to_vec(),
                batch,
            },
        )
    }

    /// `Σ weights ⊙ self` as a `1 x 1` value.
    pub fn weighted_sum(&self, weights: &Tensor<S>) -> Var<S> {
        assert_eq!(weights.shape(), self.shape());
        let total = self
            .value()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Self::make(
            Tensor::scalar(total),
            self.requires_grad(),
            Op::WeightedSum(self.clone(), weights.clone()),
        )
    }

    /// Back-propagates from this value (seeded with ones) and returns the
    /// gradients of every trainable leaf reachable from it.
    pub fn backward(&self) -> Gradients<S> {
        let mut order: Vec<Var<S>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            for p in v.0.op.inputs() {
                stack.push(p.clone());
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<usize, Tensor<S>> = HashMap::new();
        let mut leaves = HashMap::new();
        let [r, c] = self.shape();
        pending.insert(self.id(), Tensor::filled(r, c, S::one()));
        for node in order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                leaves.insert(node.id(), g);
            } else {
                node.propagate(&g, &mut pending);
            }
        }
        Gradients { map: leaves }
    }

    fn propagate(&self, g: &Tensor<S>, pending: &mut HashMap<usize, Tensor<S>>) {
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul(a, w) => {
                if a.requires_grad() {
                    accumulate(pending, a, g.matmul(w.value(), false, true));
                }
                if w.requires_grad() {
                    accumulate(pending, w, a.value().matmul(g, true, false));
                }
            }
            Op::AddBias(a, b) => {
                if b.requires_grad() {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d = *d + gv;
                        }
                    }
                    accumulate(pending, b, db);
                }
                if a.requires_grad() {
                    accumulate(pending, a, g.clone());
                }
            }
            Op::Add(a, b) => {
                if a.requires_grad() {
                    accumulate(pending, a, g.clone());
                }
                if b.requires_grad() {
                    accumulate(pending, b, g.clone());
                }
            }
            Op::Scale(a, s) => accumulate(pending, a, g.map(|v| v * *s)),
            Op::Relu(a) => {
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(a.value().data()) {
                    if x <= S::zero() {
                        *dv = S::zero();
                    }
                }
                accumulate(pending, a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (g.rows(), g.cols());
                let dn = S::from_usize(d).unwrap();
                let gm = gamma.value().data();
                let mut dx = Tensor::zeros(n, d);
                let mut dgamma = Tensor::zeros(1, d);
                let mut dbeta = Tensor::zeros(1, d);
                let mut dxhat = vec![S::zero(); d];
                for r in 0..n {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for c in 0..d {
                        dxhat[c] = gr[c] * gm[c];
                        m1 = m1 + dxhat[c];
                        m2 = m2 + dxhat[c] * xh[c];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    let inv = inv_std[r];
                    let dr = dx.row_mut(r);
                    for c in 0..d {
                        dr[c] = inv * (dxhat[c] - m1 - xh[c] * m2);
                    }
                    let dg = dgamma.data_mut();
                    for c in 0..d {
                        dg[c] = dg[c] + gr[c] * xh[c];
                    }
                    let db = dbeta.data_mut();
                    for c in 0..d {
                        db[c] = db[c] + gr[c];
                    }
                }
                accumulate(pending, x, dx);
                accumulate(pending, gamma, dgamma);
                accumulate(pending, beta, dbeta);
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let src = qkv.value().data();
                let n = g.rows();
                let d = g.cols();
                let dh = d / heads;
                let w3 = 3 * d;
                let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
                let mut dqkv = Tensor::zeros(n, w3);
                let mut dp = vec![S::zero(); seq];
                let gd = g.data();
                {
                    let dd = dqkv.data_mut();
                    for s in 0..n / seq {
                        let base = s * seq;
                        for h in 0..heads {
                            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                            for i in 0..seq {
                                let p_off = ((s * heads + h) * seq + i) * seq;
                                let p = &probs[p_off..p_off + seq];
                                let go = &gd[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                                let mut dot = S::zero();
                                for j in 0..seq {
                                    let vrow = (base + j) * w3 + vo;
                                    let mut acc = S::zero();
                                    for t in 0..dh {
                                        acc = acc + go[t] * src[vrow + t];
                                        dd[vrow + t] = dd[vrow + t] + p[j] * go[t];
                                    }
                                    dp[j] = acc;
                                    dot = dot + p[j] * acc;
                                }
                                let qrow = (base + i) * w3 + qo;
                                for j in 0..seq {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    let krow = (base + j) * w3 + ko;
                                    for t in 0..dh {
                                        dd[qrow + t] = dd[qrow + t] + ds * src[krow + t];
                                        dd[krow + t] = dd[krow + t] + ds * src[qrow + t];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(pending, qkv, dqkv);
            }
            Op::Assemble(parts) => {
                for (part, off) in parts {
                    if !part.requires_grad() {
                        continue;
                    }
                    let [rows, cols] = part.shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[*off..off + cols]);
                    }
                    accumulate(pending, part, d);
                }
            }
            Op::Standardize {
                x,
                seq,
                xhat,
                inv_std,
            } => {
                let seq = *seq;
                let (n, c) = (g.rows(), g.cols());
                let batch = n / seq;
                let bn = S::from_usize(batch).unwrap();
                let mut dx = Tensor::zeros(n, c);
                for i in 0..seq {
                    for col in 0..c {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for b in 0..batch {
                            let r = b * seq + i;
                            m1 = m1 + g.get(r, col);
                            m2 = m2 + g.get(r, col) * xhat.get(r, col);
                        }
                        m1 = m1 / bn;
                        m2 = m2 / bn;
                        let inv = inv_std[i * c + col];
                        for b in 0..batch {
                            let r = b * seq + i;
                            dx.set(r, col, inv * (g.get(r, col) - m1 - xhat.get(r, col) * m2));
                        }
                    }
                }
                accumulate(pending, x, dx);
            }
            Op::PositionAffine { x, seq, scale } => {
                let c = g.cols();
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let i = r % seq;
                    for (col, v) in dx.row_mut(r).iter_mut().enumerate() {
                        *v = *v * scale[i * c + col];
                    }
                }
                accumulate(pending, x, dx);
            }
            Op::AddPositional { x, pos } => {
                if pos.requires_grad() {
                    let seq = pos.shape()[0];
                    let mut dpos = Tensor::zeros(seq, g.cols());
                    for r in 0..g.rows() {
                        for (d, &gv) in dpos.row_mut(r % seq).iter_mut().zip(g.row(r)) {
                            *d = *d + gv;
                        }
                    }
                    accumulate(pending, pos, dpos);
                }
                if x.requires_grad() {
                    accumulate(pending, x, g.clone());
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                batch,
            } => {
                let k = g.data()[0] / S::from_usize(*batch).unwrap();
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] = row[y] - S::one();
                    for v in row.iter_mut() {
                        *v = *v * k;
                    }
                }
                accumulate(pending, logits, d);
            }
            Op::WeightedSum(x, w) => {
                let k = g.data()[0];
                accumulate(pending, x, w.map(|v| v * k));
            }
        }
    }
}

fn accumulate<S: Scalar>(pending: &mut HashMap<usize, Tensor<S>>, var: &Var<S>, grad: Tensor<S>) {
    if !var.requires_grad() {
        return;
    }
    match pending.get_mut(&var.id()) {
        Some(existing) => existing.add_assign(&grad),
        None => {
            pending.insert(var.id(), grad);
        }
    }
}

/// Gradients of trainable leaves, keyed by the leaf's identity.
pub struct Gradients<S: Scalar> {
    map: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: &Var<S>) -> Option<&Tensor<S>> {
        self.map.get(&var.id())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the
    /// output.
    pub fn get_or_zeros(&self, var: &Var<S>) -> Tensor<S> {
        self.get(var).cloned().unwrap_or_else(|| {
            let [r, c] = var.shape();
            Tensor::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite-difference check of d(loss)/d(input) for a graph built
    /// by `f` from a single trainable input.
    fn check(input: Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) {
        let leaf = Var::leaf(input.clone());
        let out = f(&leaf);
        let grads = out.backward();
        let analytic = grads.get_or_zeros(&leaf);
        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let fp = f(&Var::constant(plus)).value().data()[0];
            let fm = f(&Var::constant(minus)).value().data()[0];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-5 || (a - numeric).abs() < 1e-8,
                "index {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_bias_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        let b = random(&mut rng, 1, 4);
        let probe = random(&mut rng, 5, 4);
        check(random(&mut rng, 5, 3), |x| {
            x.matmul(&Var::constant(w.clone()))
                .add_bias(&Var::constant(b.clone()))
                .relu()
                .weighted_sum(&probe)
        });
        let x = random(&mut rng, 5, 3);
        check(w.clone(), |wv| {
            Var::constant(x.clone())
                .matmul(wv)
                .add_bias(&Var::constant(b.clone()))
                .weighted_sum(&probe)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random(&mut rng, 1, 6);
        let b = random(&mut rng, 1, 6);
        let probe = random(&mut rng, 4, 6);
        check(random(&mut rng, 4, 6), |x| {
            x.layer_norm(&Var::constant(g.clone()), &Var::constant(b.clone()))
                .weighted_sum(&probe)
        });
        let x = random(&mut rng, 4, 6);
        check(g.clone(), |gv| {
            Var::constant(x.clone())
                .layer_norm(gv, &Var::constant(b.clone()))
                .weighted_sum(&probe)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = random(&mut rng, 6, 4);
        check(random(&mut rng, 6, 12), |x| x.self_attention(3, 2).weighted_sum(&probe));
    }

    #[test]
    fn standardize_and_assemble_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = random(&mut rng, 8, 3);
        let other = random(&mut rng, 8, 1);
        check(random(&mut rng, 8, 1), |x| {
            let (s, _) = x.standardize_positions(2).unwrap();
            Var::assemble(8, 3, &[(s, 0), (Var::constant(other.clone()), 2)]).weighted_sum(&probe)
        });
    }

    #[test]
    fn cross_entropy_and_positional_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = vec![0, 3, 1, 2];
        check(random(&mut rng, 4, 4), |x| x.cross_entropy(&labels, 2));
        let pos = random(&mut rng, 2, 4);
        check(random(&mut rng, 4, 4), |x| {
            x.add_positional(&Var::constant(pos.clone())).cross_entropy(&labels, 2)
        });
    }

    #[test]
    fn standardize_rejects_constant_batch() {
        let x = Var::constant(Tensor::<f64>::filled(4, 1, 0.5));
        assert!(matches!(x.standardize_positions(2), Err(Error::Numerical(_))));
    }

    #[test]
    fn constants_do_not_retain_parents() {
        let a = Var::constant(Tensor::<f32>::filled(2, 2, 1.0));
        let b = a.relu().scale(2.0);
        assert!(!b.requires_grad());
        assert_eq!(Rc::strong_count(&a.0), 1);
    }
}
