//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation as it is applied to [`Var`] handles and
//! stores the forward value of each node. [`Tape::backward`] walks the record
//! in reverse creation order and accumulates gradients into every node that
//! can influence the root. Gradients of leaves (parameters, injected vectors)
//! are then read back with [`Tape::grad`].
//!
//! The op set is deliberately small and fused where fusion buys numerical
//! stability or speed: attention (with causal masking over a chunked KV
//! cache), layer norm, masked cross-entropy, and the robust elementwise mean
//! used by the distillation loss are each a single node.
//!
//! Everything is generic over [`Float`] so the same graph code runs in `f32`
//! for training and `f64` for finite-difference gradient verification.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Scalar type the tape computes with. `f32` for training throughput,
/// `f64` for gradient checks.
pub trait Float: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Float for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    fn i(self) -> usize {
        self.0 as usize
    }
}

/// Elementwise distance used by the robust mean. Smooth-L1 uses a fixed
/// transition point of 1.0.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    L1,
    SmoothL1,
}

const SMOOTH_L1_DELTA: f64 = 1.0;

enum Op<F: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    /// (T,d) + broadcast (1,d) row.
    AddRow(Var, Var),
    MatMul(Var, Var),
    /// a (m,k) × b (n,k)ᵀ → (m,n).
    MatMulTransB(Var, Var),
    SliceCols(Var, usize, usize),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Per-row mean and 1/std saved by the forward pass.
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    /// Row gather. Duplicate indices accumulate in the backward pass.
    Rows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    /// Causal multi-head attention of a query chunk over a chunked KV list
    /// (the current chunk's K/V included as the final entries). Query row j
    /// sees key positions 0..=(Tk - Tq + j). Softmax weights are saved per
    /// head for the backward pass and for attention probes.
    Attend {
        q: Var,
        keys: Vec<Var>,
        vals: Vec<Var>,
        n_heads: usize,
        weights: Vec<Array2<F>>,
    },
    /// Mean negative log-likelihood over the rows selected by `mask`,
    /// row i scored against `targets[i]`. Softmax probabilities are saved.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Array2<F>,
        count: usize,
    },
    /// Mean over all entries of ρ(x) for the chosen distance.
    RobustMean(Var, Distance),
    /// Identity forward, zero backward.
    StopGrad,
}

struct Node<F: Float> {
    value: Array2<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Operation record plus forward values; one per batch (or per decoded
/// sequence). Create vars with [`Tape::leaf`] / [`Tape::constant`], build the
/// graph with the op methods, call [`Tape::backward`] on a scalar node.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.i()].value
    }

    /// Value of a (1,1) node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[[0, 0]]
    }

    /// Gradient accumulated by the last [`Tape::backward`]. `None` when the
    /// node cannot influence the root (e.g. behind a stop-gradient) or was
    /// created with `needs_grad = false`.
    pub fn grad(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.i()).and_then(|g| g.as_ref())
    }

    /// Saved softmax weights of an [`Op::Attend`] node, one (Tq, Tk) matrix
    /// per head.
    pub fn attention_weights(&self, v: Var) -> &[Array2<F>] {
        match &self.nodes[v.i()].op {
            Op::Attend { weights, .. } => weights,
            _ => panic!("attention_weights() on a non-attention node"),
        }
    }

    fn push(&mut self, value: Array2<F>, needs_grad: bool, op: Op<F>) -> Var {
        let id = self.nodes.len();
        assert!(id <= u32::MAX as usize, "tape overflow");
        self.nodes.push(Node { value, needs_grad, op });
        Var(id as u32)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.i()].needs_grad
    }

    /// Differentiable input (parameter or injected vector).
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        let g = self.ng(a);
        self.push(v, g, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a (1,d) row");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        let g = self.ng(a) || self.ng(row);
        self.push(v, g, Op::AddRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.value(a).dot(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::MatMul(a, b))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols());
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::MatMulTransB(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        assert!(c0 < c1 && c1 <= self.value(a).ncols());
        let v = self.value(a).slice(s![.., c0..c1]).to_owned();
        let g = self.ng(a);
        self.push(v, g, Op::SliceCols(a, c0, c1))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_tanh);
        let g = self.ng(a);
        self.push(v, g, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let xv = self.value(x);
        let (t, d) = xv.dim();
        assert_eq!(self.value(gain).dim(), (1, d));
        assert_eq!(self.value(bias).dim(), (1, d));
        let mut mean = Vec::with_capacity(t);
        let mut inv_std = Vec::with_capacity(t);
        let mut v = Array2::zeros((t, d));
        let nd = F::from_f64(d as f64);
        for i in 0..t {
            let row = xv.row(i);
            let mu = row.sum() / nd;
            let var = row.fold(F::zero(), |acc, &x| acc + (x - mu) * (x - mu)) / nd;
            let is = F::one() / (var + eps).sqrt();
            mean.push(mu);
            inv_std.push(is);
            let gv = self.value(gain);
            let bv = self.value(bias);
            for j in 0..d {
                v[[i, j]] = (row[j] - mu) * is * gv[[0, j]] + bv[[0, j]];
            }
        }
        let g = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v, g, Op::LayerNorm { x, gain, bias, mean, inv_std })
    }

    pub fn rows(&mut self, src: Var, ids: Vec<usize>) -> Var {
        let sv = self.value(src);
        let mut v = Array2::zeros((ids.len(), sv.ncols()));
        for (out, &id) in ids.iter().enumerate() {
            assert!(id < sv.nrows(), "row index out of range");
            v.row_mut(out).assign(&sv.row(id));
        }
        let g = self.ng(src);
        self.push(v, g, Op::Rows(src, ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((total, d));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), d);
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, g, Op::ConcatRows(parts.to_vec()))
    }

    /// Causal multi-head attention. `kv` lists (key, value) projection chunks
    /// in stream order; the final entry is the current chunk's own K/V. The
    /// output is the concatenation of per-head `softmax(q kᵀ/√dh) v`, ready
    /// for the output projection.
    pub fn attend(&mut self, q: Var, kv: &[(Var, Var)], n_heads: usize) -> Var {
        let (tq, d) = self.value(q).dim();
        assert!(n_heads > 0 && d % n_heads == 0);
        let dh = d / n_heads;
        let tk: usize = kv.iter().map(|&(k, _)| self.value(k).nrows()).sum();
        assert!(tk >= tq, "KV list must include the current chunk");
        let offset = tk - tq;

        let mut kfull = Array2::zeros((tk, d));
        let mut vfull = Array2::zeros((tk, d));
        let mut at = 0;
        for &(k, v) in kv {
            let kv_rows = self.value(k).nrows();
            assert_eq!(self.value(v).nrows(), kv_rows);
            assert_eq!(self.value(k).ncols(), d);
            assert_eq!(self.value(v).ncols(), d);
            kfull.slice_mut(s![at..at + kv_rows, ..]).assign(self.value(k));
            vfull.slice_mut(s![at..at + kv_rows, ..]).assign(self.value(v));
            at += kv_rows;
        }

        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let qv = self.value(q);
        let mut out = Array2::zeros((tq, d));
        let mut weights = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = qv.slice(s![.., cols.clone()]);
            let kh = kfull.slice(s![.., cols.clone()]);
            let vh = vfull.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            let mut w = Array2::zeros((tq, tk));
            for i in 0..tq {
                let visible = offset + i + 1;
                let row = scores.row(i);
                let mut mx = row[0];
                for j in 1..visible {
                    if row[j] > mx {
                        mx = row[j];
                    }
                }
                let mut sum = F::zero();
                for j in 0..visible {
                    let e = (row[j] - mx).exp();
                    w[[i, j]] = e;
                    sum = sum + e;
                }
                for j in 0..visible {
                    w[[i, j]] = w[[i, j]] / sum;
                }
            }
            out.slice_mut(s![.., cols]).assign(&w.dot(&vh));
            weights.push(w);
        }

        let g = self.ng(q) || kv.iter().any(|&(k, v)| self.ng(k) || self.ng(v));
        let (keys, vals) = kv.iter().copied().unzip();
        self.push(out, g, Op::Attend { q, keys, vals, n_heads, weights })
    }

    /// Mean NLL of `targets[i]` under row i's softmax, over rows with
    /// `mask[i]` set. At least one row must be selected.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, mask: Vec<bool>) -> Var {
        let lv = self.value(logits);
        let (t, vocab) = lv.dim();
        assert_eq!(targets.len(), t);
        assert_eq!(mask.len(), t);
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "cross_entropy with empty mask");

        let mut probs = Array2::zeros((t, vocab));
        let mut loss = F::zero();
        for i in 0..t {
            let row = lv.row(i);
            let mx = row.fold(row[0], |a, &b| if b > a { b } else { a });
            let mut sum = F::zero();
            for j in 0..vocab {
                sum = sum + (row[j] - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..vocab {
                probs[[i, j]] = (row[j] - lse).exp();
            }
            if mask[i] {
                assert!(targets[i] < vocab);
                loss = loss - (row[targets[i]] - lse);
            }
        }
        loss = loss / F::from_f64(count as f64);

        let g = self.ng(logits);
        let v = Array2::from_elem((1, 1), loss);
        self.push(v, g, Op::CrossEntropy { logits, targets, mask, probs, count })
    }

    /// Mean over all entries of |x| (L1) or the Huber-style smooth-L1.
    pub fn robust_mean(&mut self, x: Var, kind: Distance) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        assert!(n > 0);
        let mut acc = 0.0f64;
        for &e in xv.iter() {
            acc += rho(e.to_f64(), kind);
        }
        let v = Array2::from_elem((1, 1), F::from_f64(acc / n as f64));
        let g = self.ng(x);
        self.push(v, g, Op::RobustMean(x, kind))
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, false, Op::StopGrad)
    }

    /// Accumulate gradients of `root` (a (1,1) node) into every contributing
    /// node. Replaces gradients from any previous call.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        assert!(self.nodes[root.i()].needs_grad, "backward root has no gradient path");
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[root.i()] = Some(Array2::ones((1, 1)));

        for i in (0..=root.i()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_back(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, delta: ArrayView2<F>) {
        if !self.nodes[v.i()].needs_grad {
            return;
        }
        match &mut self.grads[v.i()] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta.to_owned()),
        }
    }

    fn acc_owned(&mut self, v: Var, delta: Array2<F>) {
        if !self.nodes[v.i()].needs_grad {
            return;
        }
        match &mut self.grads[v.i()] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn step_back(&mut self, i: usize, g: &Array2<F>) {
        // Ops are matched by moving cheap handles out; saved arrays stay put.
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.view());
                self.acc(b, g.view());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.view());
                self.acc_owned(b, g.mapv(|x| -x));
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.acc_owned(a, g.mapv(|x| x * c));
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.acc(a, g.view());
                let sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc_owned(row, sum);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.dot(&self.nodes[b.i()].value.t());
                let db = self.nodes[a.i()].value.t().dot(g);
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::MatMulTransB(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.dot(&self.nodes[b.i()].value);
                let db = g.t().dot(&self.nodes[a.i()].value);
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::SliceCols(a, c0, c1) => {
                let (a, c0, c1) = (*a, *c0, *c1);
                let full = self.nodes[a.i()].value.dim();
                let mut da = Array2::zeros(full);
                da.slice_mut(s![.., c0..c1]).assign(g);
                self.acc_owned(a, da);
            }
            Op::Gelu(a) => {
                let a = *a;
                let mut da = self.nodes[a.i()].value.mapv(gelu_tanh_deriv);
                da *= g;
                self.acc_owned(a, da);
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = &self.nodes[x.i()].value;
                let gv = &self.nodes[gain.i()].value;
                let (t, d) = xv.dim();
                let nd = F::from_f64(d as f64);
                let mut dx = Array2::zeros((t, d));
                let mut dgain = Array2::zeros((1, d));
                let mut dbias = Array2::zeros((1, d));
                for r in 0..t {
                    let mu = mean[r];
                    let is = inv_std[r];
                    // dxhat = g * gain; dx from the standard fused form.
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for c in 0..d {
                        let xhat = (xv[[r, c]] - mu) * is;
                        let dxh = g[[r, c]] * gv[[0, c]];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat;
                        dgain[[0, c]] = dgain[[0, c]] + g[[r, c]] * xhat;
                        dbias[[0, c]] = dbias[[0, c]] + g[[r, c]];
                    }
                    m1 = m1 / nd;
                    m2 = m2 / nd;
                    for c in 0..d {
                        let xhat = (xv[[r, c]] - mu) * is;
                        let dxh = g[[r, c]] * gv[[0, c]];
                        dx[[r, c]] = is * (dxh - m1 - xhat * m2);
                    }
                }
                self.acc_owned(x, dx);
                self.acc_owned(gain, dgain);
                self.acc_owned(bias, dbias);
            }
            Op::Rows(src, ids) => {
                let src = *src;
                let ids = ids.clone();
                let mut dsrc = Array2::zeros(self.nodes[src.i()].value.dim());
                for (out, &id) in ids.iter().enumerate() {
                    let mut row = dsrc.row_mut(id);
                    row += &g.row(out);
                }
                self.acc_owned(src, dsrc);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let rows = self.nodes[p.i()].value.nrows();
                    let dg = g.slice(s![at..at + rows, ..]).to_owned();
                    self.acc_owned(p, dg);
                    at += rows;
                }
            }
            Op::Attend { q, keys, vals, n_heads, weights } => {
                let q = *q;
                let keys = keys.clone();
                let vals = vals.clone();
                let n_heads = *n_heads;
                let (tq, d) = self.nodes[q.i()].value.dim();
                let dh = d / n_heads;
                let tk = weights[0].ncols();
                let scale = F::from_f64(1.0 / (dh as f64).sqrt());

                // Reassemble K and V exactly as the forward pass saw them.
                let mut kfull = Array2::zeros((tk, d));
                let mut vfull = Array2::zeros((tk, d));
                let mut at = 0;
                for (&k, &v) in keys.iter().zip(&vals) {
                    let rows = self.nodes[k.i()].value.nrows();
                    kfull
                        .slice_mut(s![at..at + rows, ..])
                        .assign(&self.nodes[k.i()].value);
                    vfull
                        .slice_mut(s![at..at + rows, ..])
                        .assign(&self.nodes[v.i()].value);
                    at += rows;
                }

                let mut dq = Array2::zeros((tq, d));
                let mut dk = Array2::zeros((tk, d));
                let mut dv = Array2::zeros((tk, d));
                for h in 0..n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let w = &self.nodes[i].op_attend_weights()[h];
                    let gh = g.slice(s![.., cols.clone()]);
                    let qh = self.nodes[q.i()].value.slice(s![.., cols.clone()]);
                    let kh = kfull.slice(s![.., cols.clone()]);
                    let vh = vfull.slice(s![.., cols.clone()]);

                    // dV += Wᵀ g ; dW = g Vᵀ ; softmax backward ; dq, dK.
                    let dvh = w.t().dot(&gh);
                    let dw = gh.dot(&vh.t());
                    let mut ds = Array2::zeros((tq, tk));
                    for r in 0..tq {
                        let mut dot = F::zero();
                        for c in 0..tk {
                            dot = dot + dw[[r, c]] * w[[r, c]];
                        }
                        for c in 0..tk {
                            ds[[r, c]] = w[[r, c]] * (dw[[r, c]] - dot);
                        }
                    }
                    ds.mapv_inplace(|x| x * scale);
                    let dqh = ds.dot(&kh);
                    let dkh = ds.t().dot(&qh);
                    dq.slice_mut(s![.., cols.clone()]).assign(&dqh);
                    dk.slice_mut(s![.., cols.clone()]).assign(&dkh);
                    dv.slice_mut(s![.., cols]).assign(&dvh);
                }

                self.acc_owned(q, dq);
                let mut at = 0;
                for (&k, &v) in keys.iter().zip(&vals) {
                    let rows = self.nodes[k.i()].value.nrows();
                    let dkc = dk.slice(s![at..at + rows, ..]).to_owned();
                    let dvc = dv.slice(s![at..at + rows, ..]).to_owned();
                    self.acc_owned(k, dkc);
                    self.acc_owned(v, dvc);
                    at += rows;
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let logits = *logits;
                let gs = g[[0, 0]] / F::from_f64(*count as f64);
                let mut dl = Array2::zeros(probs.dim());
                for r in 0..probs.nrows() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..probs.ncols() {
                        dl[[r, c]] = probs[[r, c]] * gs;
                    }
                    dl[[r, targets[r]]] = dl[[r, targets[r]]] - gs;
                }
                self.acc_owned(logits, dl);
            }
            Op::RobustMean(x, kind) => {
                let (x, kind) = (*x, *kind);
                let xv = &self.nodes[x.i()].value;
                let gs = g[[0, 0]].to_f64() / xv.len() as f64;
                let dx = xv.mapv(|e| F::from_f64(gs * rho_deriv(e.to_f64(), kind)));
                self.acc_owned(x, dx);
            }
        }
    }
}

impl<F: Float> Node<F> {
    fn op_attend_weights(&self) -> &[Array2<F>] {
        match &self.op {
            Op::Attend { weights, .. } => weights,
            _ => unreachable!(),
        }
    }
}

fn rho(x: f64, kind: Distance) -> f64 {
    match kind {
        Distance::L1 => x.abs(),
        Distance::SmoothL1 => {
            let d = SMOOTH_L1_DELTA;
            if x.abs() < d {
                0.5 * x * x / d
            } else {
                x.abs() - 0.5 * d
            }
        }
    }
}

fn rho_deriv(x: f64, kind: Distance) -> f64 {
    match kind {
        Distance::L1 => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Distance::SmoothL1 => {
            let d = SMOOTH_L1_DELTA;
            (x / d).clamp(-1.0, 1.0)
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<F: Float>(x: F) -> F {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    F::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_tanh_deriv<F: Float>(x: F) -> F {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    F::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            // Box-Muller keeps us off rand_distr for a couple of tests.
            let u1: f64 = rng.gen_range(1e-6..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central-difference check of d(root)/d(inputs[k]) for every entry of
    /// every leaf the builder registers.
    fn gradcheck(
        inputs: &[Array2<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let eval = |arrays: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.scalar(root)
        };

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.backward(root);

        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let analytic = tape
                .grad(*var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
            for r in 0..inputs[k].nrows() {
                for c in 0..inputs[k].ncols() {
                    let mut plus = inputs.to_vec();
                    plus[k][[r, c]] += h;
                    let mut minus = inputs.to_vec();
                    minus[k][[r, c]] -= h;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let err = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1.0);
                    assert!(
                        err < tol,
                        "input {k} entry ({r},{c}): numeric {numeric} vs autodiff {a}"
                    );
                }
            }
        }
    }

    /// Reduce any node to a scalar as uᵀ·node·v with distinct per-entry
    /// weights u_i·v_j, so a backward pass that misroutes entries fails.
    fn to_scalar(tape: &mut Tape<f64>, node: Var) -> Var {
        let (r, c) = tape.value(node).dim();
        let left = tape.constant(Array2::from_shape_fn((1, r), |(_, i)| {
            1.1 + (0.9 * i as f64).sin()
        }));
        let right = tape.constant(Array2::from_shape_fn((c, 1), |(j, _)| {
            0.7 + (1.3 * j as f64).cos()
        }));
        let lr = tape.matmul(left, node);
        tape.matmul(lr, right)
    }

    #[test]
    fn add_sub_scale_grads() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 3, 4);
        gradcheck(&[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let sc = t.scale(d, 1.7);
            let s2 = t.add(sc, v[1]);
            to_scalar(t, s2)
        }, 1e-6);
    }

    #[test]
    fn add_row_grads() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = randn(&mut rng, 4, 3);
        let row = randn(&mut rng, 1, 3);
        gradcheck(&[a, row], |t, v| {
            let s = t.add_row(v[0], v[1]);
            to_scalar(t, s)
        }, 1e-6);
    }

    #[test]
    fn matmul_grads() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = randn(&mut rng, 3, 5);
        let b = randn(&mut rng, 5, 2);
        gradcheck(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            to_scalar(t, m)
        }, 1e-6);
    }

    #[test]
    fn matmul_bt_grads() {
        let mut rng = StdRng::seed_from_u64(4);
        let a = randn(&mut rng, 3, 5);
        let b = randn(&mut rng, 4, 5);
        gradcheck(&[a, b], |t, v| {
            let m = t.matmul_bt(v[0], v[1]);
            to_scalar(t, m)
        }, 1e-6);
    }

    #[test]
    fn slice_cols_grads() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = randn(&mut rng, 3, 6);
        gradcheck(&[a], |t, v| {
            let s = t.slice_cols(v[0], 1, 4);
            to_scalar(t, s)
        }, 1e-6);
    }

    #[test]
    fn gelu_grads_cover_tails() {
        // Spread inputs across the negative tail, the kink region and the
        // positive tail.
        let a = Array2::from_shape_vec(
            (2, 4),
            vec![-3.5, -1.0, -0.1, 0.0, 0.1, 0.7, 1.9, 3.2],
        )
        .unwrap();
        gradcheck(&[a], |t, v| {
            let gx = t.gelu(v[0]);
            to_scalar(t, gx)
        }, 1e-6);
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = randn(&mut rng, 3, 5);
        let gain = randn(&mut rng, 1, 5);
        let bias = randn(&mut rng, 1, 5);
        gradcheck(&[x, gain, bias], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            to_scalar(t, y)
        }, 1e-5);
    }

    #[test]
    fn rows_accumulates_duplicates() {
        let mut rng = StdRng::seed_from_u64(7);
        let src = randn(&mut rng, 4, 3);
        gradcheck(&[src], |t, v| {
            let r = t.rows(v[0], vec![2, 0, 2, 3]);
            to_scalar(t, r)
        }, 1e-6);
    }

    #[test]
    fn concat_rows_grads() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = randn(&mut rng, 2, 3);
        let b = randn(&mut rng, 3, 3);
        gradcheck(&[a, b], |t, v| {
            let cat = t.concat_rows(&[v[0], v[1]]);
            to_scalar(t, cat)
        }, 1e-6);
    }

    #[test]
    fn attend_grads_multi_chunk_multi_head() {
        let mut rng = StdRng::seed_from_u64(9);
        // Chunk 1: 3 positions of history; chunk 2: 2 query positions.
        let k1 = randn(&mut rng, 3, 4);
        let v1 = randn(&mut rng, 3, 4);
        let q = randn(&mut rng, 2, 4);
        let k2 = randn(&mut rng, 2, 4);
        let v2 = randn(&mut rng, 2, 4);
        gradcheck(&[k1, v1, q, k2, v2], |t, v| {
            let out = t.attend(v[2], &[(v[0], v[1]), (v[3], v[4])], 2);
            to_scalar(t, out)
        }, 1e-5);
    }

    #[test]
    fn attend_masks_future_positions() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Array2::ones((3, 2)));
        let k = tape.leaf(Array2::ones((3, 2)));
        let v = tape.leaf(Array2::ones((3, 2)));
        let out = tape.attend(q, &[(k, v)], 1);
        let w = &tape.attention_weights(out)[0];
        assert_eq!(w[[0, 1]], 0.0);
        assert_eq!(w[[0, 2]], 0.0);
        assert_eq!(w[[1, 2]], 0.0);
        assert!((w.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((w.row(2).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grads_respect_mask() {
        let mut rng = StdRng::seed_from_u64(10);
        let logits = randn(&mut rng, 4, 5);
        gradcheck(&[logits], |t, v| {
            t.cross_entropy(v[0], vec![1, 0, 3, 2], vec![true, false, true, true])
        }, 1e-6);

        // Unmasked rows receive exactly zero gradient.
        let mut tape = Tape::<f64>::new();
        let lv = tape.leaf(randn(&mut rng, 3, 4));
        let ce = tape.cross_entropy(lv, vec![0, 1, 2], vec![true, false, true]);
        tape.backward(ce);
        let g = tape.grad(lv).unwrap();
        assert!(g.row(1).iter().all(|&x| x == 0.0));
        assert!(g.row(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Array2::zeros((2, 7)));
        let ce = tape.cross_entropy(logits, vec![3, 6], vec![true, true]);
        assert!((tape.scalar(ce) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn robust_mean_l1_grads() {
        // Keep entries away from the |x| kink.
        let x = Array2::from_shape_vec((2, 3), vec![0.5, -0.8, 1.2, -2.0, 0.3, 0.9]).unwrap();
        gradcheck(&[x], |t, v| t.robust_mean(v[0], Distance::L1), 1e-6);
    }

    #[test]
    fn robust_mean_smooth_l1_grads() {
        // Entries on both sides of the delta=1 transition, away from it.
        let x = Array2::from_shape_vec((2, 3), vec![0.4, -0.7, 1.8, -2.4, 0.2, 3.0]).unwrap();
        gradcheck(&[x], |t, v| t.robust_mean(v[0], Distance::SmoothL1), 1e-6);
    }

    #[test]
    fn robust_mean_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap());
        let l1 = tape.robust_mean(x, Distance::L1);
        assert!((tape.scalar(l1) - 1.25).abs() < 1e-12);
        let sl1 = tape.robust_mean(x, Distance::SmoothL1);
        // 0.5*0.25 = 0.125 and 2.0-0.5 = 1.5, mean = 0.8125
        assert!((tape.scalar(sl1) - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_upstream() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = randn(&mut rng, 2, 2);
        let b = randn(&mut rng, 2, 2);

        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let frozen = tape.stop_grad(av);
        let mixed = tape.add(frozen, bv);
        let root = to_scalar(&mut tape, mixed);
        tape.backward(root);

        assert!(tape.grad(av).is_none(), "gradient leaked through stop_grad");
        assert!(tape.grad(bv).is_some());
    }

    #[test]
    fn composite_chain_gradcheck() {
        // A miniature block: linear -> gelu -> layer norm -> attention ->
        // cross-entropy, checking the whole chain end to end.
        let mut rng = StdRng::seed_from_u64(12);
        let x = randn(&mut rng, 3, 4);
        let w = randn(&mut rng, 4, 4);
        let b = randn(&mut rng, 1, 4);
        let gain = randn(&mut rng, 1, 4);
        let bias = randn(&mut rng, 1, 4);
        gradcheck(&[x, w, b, gain, bias], |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.gelu(h);
            let h = t.layer_norm(h, v[3], v[4], 1e-5);
            let att = t.attend(h, &[(h, h)], 2);
            t.cross_entropy(att, vec![0, 3, 1], vec![true, true, true])
        }, 1e-5);
    }
}
