//! A small reverse-mode gradient tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.
//! Operations are the handful the models in this crate need; attention,
//! rotary positions and the loss heads are fused ops with hand-written
//! derivatives.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    RmsNorm { x: Var, inv: Vec<f64> },
    GatherRows { src: Var, idx: Vec<Option<usize>> },
    Rope { x: Var, positions: Vec<usize>, heads: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<f64> },
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Tensor },
    PickLogSoftmax { logits: Var, actions: Vec<usize>, probs: Tensor },
    ClippedSurrogate { ratio: Var, adv: Vec<f64>, eps: f64 },
    WeightedSum { x: Var, weights: Vec<f64> },
    Sum(Var),
    SquaredError { x: Var, target: Tensor },
    CosineRows { x: Var, target: Tensor, degenerate: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Gradient tape. Build a scalar with the op methods, then call [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<usize, Var>,
}

impl core::fmt::Debug for Graph {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    /// `x[n×m] + b[1×m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.shape(), (1, xv.cols), "add_row bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    /// `x[n×m] ⊙ g[1×m]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        assert_eq!(gv.shape(), (1, xv.cols), "mul_row gain shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &gg) in out.row_mut(r).iter_mut().zip(&gv.data) {
                *o *= gg;
            }
        }
        self.push(out, Op::MulRow(x, g))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::exp);
        self.push(out, Op::Exp(x))
    }

    /// Row-wise RMS normalization without gain.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / xv.cols as f64;
            let s = 1.0 / math::sqrt(ms + RMS_EPS);
            inv.push(s);
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::RmsNorm { x, inv })
    }

    /// Output row `i` is `src[idx[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let mut out = Tensor::zeros(idx.len(), sv.cols);
        for (i, ix) in idx.iter().enumerate() {
            if let Some(j) = *ix {
                assert!(j < sv.rows, "gather index {j} out of range {}", sv.rows);
                out.row_mut(i).copy_from_slice(sv.row(j));
            }
        }
        self.push(out, Op::GatherRows { src, idx })
    }

    /// Rotary position encoding applied independently inside each head.
    pub fn rope(&mut self, x: Var, positions: Vec<usize>, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(positions.len(), xv.rows);
        let out = rope_apply(xv, &positions, heads, false);
        self.push(out, Op::Rope { x, positions, heads })
    }

    /// Multi-head causal attention restricted to contiguous `(start, len)` segments.
    ///
    /// A row attends to rows of its own segment at or before itself; rows not
    /// covered by any segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d));
        assert_eq!(vv.shape(), (n, d));
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let hd = d / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::new();
        for &(start, len) in &segments {
            assert!(start + len <= n, "attention segment out of range");
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let qi = &qv.row(start + i)[off..off + hd];
                    let mut scores = vec![0.0; i + 1];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(start + j)[off..off + hd];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = math::softmax(&scores);
                    let orow = &mut out.row_mut(start + i)[off..off + hd];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv.row(start + j)[off..off + hd];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                    probs.extend_from_slice(&p);
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, segments, probs })
    }

    /// Sum over rows with a target of `-log softmax(logits)[target]` (a `1×1` value).
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows);
        let mut probs = Tensor::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = math::log_sum_exp(row);
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = math::exp(x - lse);
            }
            if let Some(t) = *t {
                assert!(t < lv.cols, "target {t} out of range {}", lv.cols);
                total += lse - row[t];
            }
        }
        self.push(Tensor::scalar(total), Op::CrossEntropySum { logits, targets, probs })
    }

    /// Column vector of `log softmax(logits_i)[actions_i]`.
    pub fn pick_log_softmax(&mut self, logits: Var, actions: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(actions.len(), lv.rows);
        let mut probs = Tensor::zeros(lv.rows, lv.cols);
        let mut out = Tensor::zeros(lv.rows, 1);
        for (r, &a) in actions.iter().enumerate() {
            let row = lv.row(r);
            let lse = math::log_sum_exp(row);
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = math::exp(x - lse);
            }
            out.data[r] = row[a] - lse;
        }
        self.push(out, Op::PickLogSoftmax { logits, actions, probs })
    }

    /// Elementwise `min(r·A, clip(r, 1-ε, 1+ε)·A)` for a column of ratios.
    pub fn clipped_surrogate(&mut self, ratio: Var, adv: Vec<f64>, eps: f64) -> Var {
        let rv = self.value(ratio);
        assert_eq!(rv.len(), adv.len());
        let data = rv.data.iter().zip(&adv).map(|(&r, &a)| clipped_term(r, a, eps).0).collect();
        let out = Tensor::from_vec(rv.rows, rv.cols, data);
        self.push(out, Op::ClippedSurrogate { ratio, adv, eps })
    }

    /// `Σ_i w_i x_i` over all entries.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let s = xv.data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ (x - target)²` over all entries.
    pub fn squared_error(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let s = xv.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s), Op::SquaredError { x, target })
    }

    /// Column of row-wise cosine similarities against a constant target.
    /// Rows where either side has zero norm yield 0.
    pub fn cosine_rows(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let mut out = Tensor::zeros(xv.rows, 1);
        let mut degenerate = vec![false; xv.rows];
        for r in 0..xv.rows {
            let (a, b) = (xv.row(r), target.row(r));
            let na = math::sqrt(a.iter().map(|v| v * v).sum());
            let nb = math::sqrt(b.iter().map(|v| v * v).sum());
            if na == 0.0 || nb == 0.0 {
                degenerate[r] = true;
                continue;
            }
            out.data[r] = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        }
        self.push(out, Op::CosineRows { x, target, degenerate })
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                let ga = slot(grads, *a, av);
                matmul_bt_acc(&mut ga.data, &g.data, &bv.data, m, n, k);
                let gb = slot(grads, *b, bv);
                matmul_at_acc(&mut gb.data, &av.data, &g.data, m, k, n);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g).add_assign(g);
                slot(grads, *b, g).add_assign(g);
            }
            Op::Sub(a, b) => {
                slot(grads, *a, g).add_assign(g);
                let gb = slot(grads, *b, g);
                for (o, &x) in gb.data.iter_mut().zip(&g.data) {
                    *o -= x;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av);
                for ((o, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                    *o += x * y;
                }
                let gb = slot(grads, *b, bv);
                for ((o, &x), &y) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *o += x * y;
                }
            }
            Op::AddRow(x, b) => {
                slot(grads, *x, g).add_assign(g);
                let bv = self.value(*b);
                let gb = slot(grads, *b, bv);
                for r in 0..g.rows {
                    for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let gx = slot(grads, *x, xv);
                for r in 0..g.rows {
                    for ((o, &d), &w) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(&gv.data) {
                        *o += d * w;
                    }
                }
                let gg = slot(grads, *gain, gv);
                for r in 0..g.rows {
                    for ((o, &d), &v) in gg.data.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                        *o += d * v;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g);
                for (o, &d) in gx.data.iter_mut().zip(&g.data) {
                    *o += d * s;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv);
                for ((o, &d), &v) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    *o += d * math::gelu_grad(v);
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, g);
                for ((o, &d), &y) in gx.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                    *o += d * y;
                }
            }
            Op::RmsNorm { x, inv } => {
                let xv = self.value(*x);
                let n = xv.cols as f64;
                let gx = slot(grads, *x, xv);
                for r in 0..xv.rows {
                    let s = inv[r];
                    let xr = xv.row(r);
                    let dr = g.row(r);
                    let dot: f64 = dr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let c = s * s * s / n * dot;
                    for ((o, &d), &v) in gx.row_mut(r).iter_mut().zip(dr).zip(xr) {
                        *o += s * d - c * v;
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let sv = self.value(*src);
                let gs = slot(grads, *src, sv);
                for (i, ix) in idx.iter().enumerate() {
                    if let Some(j) = *ix {
                        for (o, &d) in gs.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Rope { x, positions, heads } => {
                let back = rope_apply(g, positions, *heads, true);
                slot(grads, *x, g).add_assign(&back);
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, segments, probs, grads);
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let gl = slot(grads, *logits, probs);
                let up = g.item();
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o += up * p;
                        }
                        gl[(r, t)] -= up;
                    }
                }
            }
            Op::PickLogSoftmax { logits, actions, probs } => {
                let gl = slot(grads, *logits, probs);
                for (r, &a) in actions.iter().enumerate() {
                    let up = g.data[r];
                    for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o -= up * p;
                    }
                    gl[(r, a)] += up;
                }
            }
            Op::ClippedSurrogate { ratio, adv, eps } => {
                let rv = self.value(*ratio);
                let gr = slot(grads, *ratio, rv);
                for (i, (&r, &a)) in rv.data.iter().zip(adv).enumerate() {
                    gr.data[i] += g.data[i] * clipped_term(r, a, *eps).1;
                }
            }
            Op::WeightedSum { x, weights } => {
                let up = g.item();
                let gx = slot(grads, *x, self.value(*x));
                for (o, &w) in gx.data.iter_mut().zip(weights) {
                    *o += up * w;
                }
            }
            Op::Sum(x) => {
                let up = g.item();
                let gx = slot(grads, *x, self.value(*x));
                for o in gx.data.iter_mut() {
                    *o += up;
                }
            }
            Op::SquaredError { x, target } => {
                let up = g.item();
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv);
                for ((o, &a), &b) in gx.data.iter_mut().zip(&xv.data).zip(&target.data) {
                    *o += up * 2.0 * (a - b);
                }
            }
            Op::CosineRows { x, target, degenerate } => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv);
                for r in 0..xv.rows {
                    if degenerate[r] {
                        continue;
                    }
                    let (a, b) = (xv.row(r), target.row(r));
                    let na = math::sqrt(a.iter().map(|v| v * v).sum());
                    let nb = math::sqrt(b.iter().map(|v| v * v).sum());
                    let c = node.value.data[r];
                    let up = g.data[r];
                    for ((o, &ai), &bi) in gx.row_mut(r).iter_mut().zip(a).zip(b) {
                        *o += up * (bi / (na * nb) - c * ai / (na * na));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let hd = d / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(n, d);
        let mut gv = Tensor::zeros(n, d);
        let mut cursor = 0;
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let p = &probs[cursor..cursor + i + 1];
                    cursor += i + 1;
                    let gi = &g.row(start + i)[off..off + hd];
                    let mut dp = vec![0.0; i + 1];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        let vj = &vv.row(start + j)[off..off + hd];
                        *dpj = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let gvj = &mut gv.row_mut(start + j)[off..off + hd];
                        for (o, &x) in gvj.iter_mut().zip(gi) {
                            *o += p[j] * x;
                        }
                    }
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(start + j)[off..off + hd];
                        let gqi = &mut gq.row_mut(start + i)[off..off + hd];
                        for (o, &x) in gqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(start + i)[off..off + hd];
                        let gkj = &mut gk.row_mut(start + j)[off..off + hd];
                        for (o, &x) in gkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        slot(grads, q, qv).add_assign(&gq);
        slot(grads, k, kv).add_assign(&gk);
        slot(grads, v, vv).add_assign(&gv);
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}

/// Value and derivative (w.r.t. the ratio) of the clipped surrogate term.
pub fn clipped_term(r: f64, a: f64, eps: f64) -> (f64, f64) {
    let clipped = r.clamp(1.0 - eps, 1.0 + eps);
    let unclipped_val = r * a;
    let clipped_val = clipped * a;
    if unclipped_val <= clipped_val {
        (unclipped_val, a)
    } else {
        // the clip branch is constant in r
        (clipped_val, 0.0)
    }
}

fn rope_apply(x: &Tensor, positions: &[usize], heads: usize, inverse: bool) -> Tensor {
    let (n, d) = x.shape();
    assert!(heads > 0 && d % heads == 0);
    let hd = d / heads;
    assert!(hd % 2 == 0, "rotary encoding needs an even head width");
    let mut out = x.clone();
    for r in 0..n {
        let pos = positions[r] as f64;
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = pos / math::powf(ROPE_BASE, (2 * i) as f64 / hd as f64);
                let (s, c) = (math::sin(theta), math::cos(theta));
                let s = if inverse { -s } else { s };
                let a = h * hd + 2 * i;
                let (x0, x1) = (x[(r, a)], x[(r, a + 1)]);
                out[(r, a)] = x0 * c - x1 * s;
                out[(r, a + 1)] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<usize, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Dense gradient list aligned with `store`; untouched parameters get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.params
                    .get(&id.0)
                    .and_then(|v| self.wrt(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols))
            })
            .collect()
    }
}

/// Central finite-difference gradient of `f` with respect to every stored parameter.
pub fn finite_difference(store: &ParamStore, f: impl Fn(&ParamStore) -> f64, h: f64) -> Vec<Tensor> {
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = work.get(id).len();
        let mut g = Tensor::zeros(work.get(id).rows, work.get(id).cols);
        for j in 0..n {
            let orig = work.get(id).data[j];
            work.get_mut(id).data[j] = orig + h;
            let up = f(&work);
            work.get_mut(id).data[j] = orig - h;
            let down = f(&work);
            work.get_mut(id).data[j] = orig;
            g.data[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest per-tensor relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; tensors where
/// both norms are below `floor` are skipped.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = math::sqrt(x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum());
        let nx = math::sqrt(x.data.iter().map(|v| v * v).sum());
        let ny = math::sqrt(y.data.iter().map(|v| v * v).sum());
        let scale = nx.max(ny);
        if scale < floor {
            continue;
        }
        worst = worst.max(diff / scale);
    }
    worst
}
