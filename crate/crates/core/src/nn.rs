//! Layers shared by the backbone, the depth head, the reconstruction probe and
//! the tokenizer projection. Each layer only holds [`ParamId`]s; values live in
//! a [`ParamStore`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), Tensor::randn(d_in, d_out, std, rng));
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(1, d_out)));
        Self { weight, bias, d_in, d_out }
    }

    /// Default init: `N(0, 1/d_in)`.
    pub fn xavier<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(store, name, d_in, d_out, bias, 1.0 / math::sqrt(d_in as f64), rng)
    }

    pub fn from_ids(store: &ParamStore, weight: ParamId, bias: Option<ParamId>) -> Self {
        let (d_in, d_out) = store.get(weight).shape();
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// RMS normalization with a learned per-channel gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(&format!("{name}.gain"), Tensor::from_vec(1, width, alloc::vec![1.0; width]));
        Self { gain }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.rms_norm(x);
        let gain = g.param(store, self.gain);
        g.mul_row(n, gain)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, out_std: f64, rng: &mut R) -> Self {
        let up = Linear::xavier(store, &format!("{name}.up"), width, hidden, true, rng);
        let down = Linear::new(store, &format!("{name}.down"), hidden, width, true, out_std, rng);
        Self { up, down }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm causal transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm_attn: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm_ffn: RmsNorm,
    pub ffn: FeedForward,
    pub heads: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let out_std = 1.0 / math::sqrt((width * 2 * n_layers.max(1)) as f64);
        Self {
            norm_attn: RmsNorm::new(store, &format!("{name}.attn_norm"), width),
            wq: Linear::xavier(store, &format!("{name}.attn.q"), width, width, false, rng),
            wk: Linear::xavier(store, &format!("{name}.attn.k"), width, width, false, rng),
            wv: Linear::xavier(store, &format!("{name}.attn.v"), width, width, false, rng),
            wo: Linear::new(store, &format!("{name}.attn.o"), width, width, false, out_std, rng),
            norm_ffn: RmsNorm::new(store, &format!("{name}.ffn_norm"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn_hidden, out_std, rng),
            heads,
        }
    }

    /// `positions` enables rotary encoding on queries and keys.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize)],
        positions: Option<&[usize]>,
    ) -> Var {
        let a = self.norm_attn.forward(g, store, x);
        let mut q = self.wq.forward(g, store, a);
        let mut k = self.wk.forward(g, store, a);
        let v = self.wv.forward(g, store, a);
        if let Some(pos) = positions {
            q = g.rope(q, pos.to_vec(), self.heads);
            k = g.rope(k, pos.to_vec(), self.heads);
        }
        let att = g.attention(q, k, v, self.heads, segments.to_vec());
        let att = self.wo.forward(g, store, att);
        let x = g.add(x, att);
        let b = self.norm_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, b);
        g.add(x, f)
    }
}

/// Splits `0..n` into contiguous runs of equal `group` values.
pub fn contiguous_segments(groups: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=groups.len() {
        if i == groups.len() || groups[i] != groups[start] {
            out.push((start, i - start));
            start = i;
        }
    }
    out
}
