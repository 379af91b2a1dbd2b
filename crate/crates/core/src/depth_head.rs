//! Depth-axis transformer that decodes the `L` level tokens of one position.
//!
//! For every backbone position the head runs a short causal sequence of
//! length `L`. Step 0 sees the backbone hidden state (projected to the head
//! width); step `s > 0` sees a learned embedding of the level `s-1` token.
//! A learned depth-position vector and a task-tag vector are added to every
//! step. Positions never attend to each other.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Block, Linear, RmsNorm};
use crate::params::{ParamId, ParamStore};
use crate::rvq::TokenGrid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskTag {
    Understanding = 0,
    Generation = 1,
    Audio = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthConfig {
    /// Backbone hidden width.
    pub hidden: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub levels: Vec<usize>,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self { hidden: 64, width: 64, layers: 2, heads: 4, levels: vec![16, 8, 8, 8] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthHead {
    pub in_proj: Linear,
    /// `level_emb[s]` embeds the level-`s` token as input to depth step `s+1`.
    pub level_emb: Vec<ParamId>,
    pub depth_pos: ParamId,
    pub tags: ParamId,
    pub blocks: Vec<Block>,
    pub norm: RmsNorm,
    pub out: Vec<Linear>,
    pub levels: Vec<usize>,
}

impl DepthHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DepthConfig, rng: &mut R) -> Result<Self> {
        if cfg.levels.is_empty() || cfg.levels.contains(&0) {
            return Err(Error::Config("depth head needs positive level sizes".into()));
        }
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", cfg.width, cfg.heads)));
        }
        let w = cfg.width;
        let l = cfg.levels.len();
        let emb_std = 1.0 / math::sqrt(w as f64);
        let in_proj = Linear::xavier(store, &format!("{name}.in_proj"), cfg.hidden, w, true, rng);
        let level_emb = (0..l - 1)
            .map(|s| store.add(&format!("{name}.level_emb.{s}"), Tensor::randn(cfg.levels[s], w, emb_std, rng)))
            .collect();
        let depth_pos = store.add(&format!("{name}.depth_pos"), Tensor::randn(l, w, 0.02, rng));
        let tags = store.add(&format!("{name}.tags"), Tensor::randn(3, w, 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("{name}.block.{i}"), w, cfg.heads, 4 * w, cfg.layers, rng))
            .collect();
        let norm = RmsNorm::new(store, &format!("{name}.norm"), w);
        let out = cfg
            .levels
            .iter()
            .enumerate()
            .map(|(s, &k)| Linear::xavier(store, &format!("{name}.out.{s}"), w, k, true, rng))
            .collect();
        Ok(Self { in_proj, level_emb, depth_pos, tags, blocks, norm, out, levels: cfg.levels.clone() })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Per-level logits (`n × K_l`) on the tape.
    ///
    /// `teacher[p]` holds at least the tokens of levels `0..L-1` for position
    /// `p`; the last level's token is never read.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        teacher: &[&[u32]],
        tags: &[TaskTag],
    ) -> Result<Vec<Var>> {
        let n = g.value(hidden).rows;
        let l = self.n_levels();
        if teacher.len() != n || tags.len() != n {
            return Err(Error::Config(format!(
                "depth head got {n} hidden rows, {} teacher rows, {} tags",
                teacher.len(),
                tags.len()
            )));
        }
        for row in teacher {
            if row.len() + 1 < l {
                return Err(Error::Config(format!("teacher row has {} levels, need {}", row.len(), l - 1)));
            }
            for (s, &t) in row.iter().take(l - 1).enumerate() {
                if t as usize >= self.levels[s] {
                    return Err(Error::Decode(format!("level {s} token {t} out of range {}", self.levels[s])));
                }
            }
        }
        let rows = n * l;
        let h = self.in_proj.forward(g, store, hidden);
        let mut x = g.gather_rows(h, (0..rows).map(|r| (r % l == 0).then_some(r / l)).collect());
        for s in 1..l {
            let table = g.param(store, self.level_emb[s - 1]);
            let idx = (0..rows).map(|r| (r % l == s).then(|| teacher[r / l][s - 1] as usize)).collect();
            let e = g.gather_rows(table, idx);
            x = g.add(x, e);
        }
        let pos = g.param(store, self.depth_pos);
        let pos = g.gather_rows(pos, (0..rows).map(|r| Some(r % l)).collect());
        x = g.add(x, pos);
        let tag_table = g.param(store, self.tags);
        let tag = g.gather_rows(tag_table, (0..rows).map(|r| Some(tags[r / l] as usize)).collect());
        x = g.add(x, tag);
        let segments: Vec<(usize, usize)> = (0..n).map(|p| (p * l, l)).collect();
        for b in &self.blocks {
            x = b.forward(g, store, x, &segments, None);
        }
        let x = self.norm.forward(g, store, x);
        let mut logits = Vec::with_capacity(l);
        for (s, out) in self.out.iter().enumerate() {
            let rows_s = g.gather_rows(x, (0..n).map(|p| Some(p * l + s)).collect());
            logits.push(out.forward(g, store, rows_s));
        }
        Ok(logits)
    }

    /// Teacher-forced logits for a batch of positions.
    pub fn depth_forward(&self, store: &ParamStore, hidden: &Tensor, teacher: &TokenGrid, tags: &[TaskTag]) -> Result<Vec<Tensor>> {
        if teacher.n_levels() != self.n_levels() {
            return Err(Error::Config(format!("teacher has {} levels, head has {}", teacher.n_levels(), self.n_levels())));
        }
        let mut g = Graph::new();
        let hv = g.constant(hidden.clone());
        let rows: Vec<&[u32]> = (0..teacher.n_positions()).map(|p| teacher.position(p)).collect();
        let logits = self.forward_graph(&mut g, store, hv, &rows, tags)?;
        Ok(logits.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Decodes levels one at a time, feeding each sampled token back in.
    /// `temperature = None` is greedy.
    pub fn depth_sample<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        hidden: &Tensor,
        tags: &[TaskTag],
        temperature: Option<f64>,
        rng: &mut R,
    ) -> Result<TokenGrid> {
        if let Some(t) = temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        let (n, l) = (hidden.rows, self.n_levels());
        let mut tokens = vec![vec![0u32; l]; n];
        for s in 0..l {
            let mut g = Graph::new();
            let hv = g.constant(hidden.clone());
            let rows: Vec<&[u32]> = tokens.iter().map(|r| r.as_slice()).collect();
            let logits = self.forward_graph(&mut g, store, hv, &rows, tags)?;
            let ls = g.value(logits[s]);
            for (p, row) in tokens.iter_mut().enumerate() {
                row[s] = sample_token(ls.row(p), temperature, rng) as u32;
            }
        }
        TokenGrid::flat(tokens.concat(), l)
    }
}

/// Draws from `softmax(logits / temperature)`, or takes the argmax when
/// `temperature` is `None`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: Option<f64>, rng: &mut R) -> usize {
    match temperature {
        None => math::argmax(logits),
        Some(t) => {
            let scaled: Vec<f64> = logits.iter().map(|x| x / t).collect();
            math::categorical(rng, &math::softmax(&scaled))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub count: usize,
    pub fully_masked: bool,
}

/// Mean cross-entropy over unmasked `(position, level)` pairs.
pub fn depth_loss(logits: &[Tensor], targets: &TokenGrid, mask: &[bool]) -> Result<DepthLoss> {
    let (n, l) = (targets.n_positions(), targets.n_levels());
    if logits.len() != l || mask.len() != n || logits.iter().any(|t| t.rows != n) {
        return Err(Error::Config("depth loss shapes do not align".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for (s, lg) in logits.iter().enumerate() {
            let row = lg.row(p);
            let t = targets.get(p, s) as usize;
            if t >= row.len() {
                return Err(Error::Decode(format!("target {t} out of range {}", row.len())));
            }
            total += math::log_sum_exp(row) - row[t];
            count += 1;
        }
    }
    if count == 0 {
        return Ok(DepthLoss { value: 0.0, count, fully_masked: true });
    }
    Ok(DepthLoss { value: total / count as f64, count, fully_masked: false })
}

/// Sum (not mean) of per-level cross-entropy on the tape, with the number of
/// terms. `targets[p]` is `None` for positions without a frame target.
pub fn depth_loss_graph(g: &mut Graph, logits: &[Var], targets: &[Option<&[u32]>]) -> (Option<Var>, usize) {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (s, &lg) in logits.iter().enumerate() {
        let t: Vec<Option<usize>> = targets.iter().map(|r| r.map(|r| r[s] as usize)).collect();
        count += t.iter().flatten().count();
        let ce = g.cross_entropy_sum(lg, t);
        total = Some(match total {
            Some(acc) => g.add(acc, ce),
            None => ce,
        });
    }
    (total, count)
}
