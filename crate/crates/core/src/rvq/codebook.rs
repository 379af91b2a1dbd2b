use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{squared_distance, Projection, QuantizeResult};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_SMOOTHING_EPS: f64 = 1e-5;

/// One level: `K` entries with their EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookLevel {
    /// `K × d` centroids.
    pub entries: Tensor,
    /// Running cluster sizes `N_k`.
    pub cluster_size: Vec<f64>,
    /// Running embedding sums `m_k`, `K × d`.
    pub embed_sum: Tensor,
}

impl CodebookLevel {
    pub fn size(&self) -> usize {
        self.entries.rows
    }

    /// Nearest entry by squared Euclidean distance; lowest index wins ties.
    pub fn nearest(&self, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.entries.rows {
            let d = squared_distance(r, self.entries.row(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Laplace-smoothed cluster sizes: `(N_k + ε) / (ΣN + K·ε) · ΣN`.
    pub fn smoothed_sizes(&self, eps: f64) -> Vec<f64> {
        let total: f64 = self.cluster_size.iter().sum();
        let k = self.size() as f64;
        self.cluster_size.iter().map(|&n| (n + eps) / (total + k * eps) * total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    levels: Vec<CodebookLevel>,
    dim: usize,
    decay: f64,
    smoothing_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    /// Entries that received at least one assignment in this batch.
    pub used: usize,
    pub reinitialized: usize,
    /// `exp(H)` of the batch assignment histogram.
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmaReport {
    /// The batch was empty and nothing was updated.
    pub empty_batch: bool,
    pub levels: Vec<LevelReport>,
}

impl EmaReport {
    pub fn utilization(&self, sizes: &[usize]) -> f64 {
        let used: usize = self.levels.iter().map(|l| l.used).sum();
        let total: usize = sizes.iter().sum();
        if total == 0 {
            0.0
        } else {
            used as f64 / total as f64
        }
    }
}

fn check_hyper(decay: f64, smoothing_eps: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(config_err!("EMA decay {decay} must lie in (0, 1)"));
    }
    if !(smoothing_eps > 0.0 && smoothing_eps.is_finite()) {
        return Err(config_err!("smoothing epsilon {smoothing_eps} must be positive"));
    }
    Ok(())
}

impl Codebook {
    /// Builds a codebook from explicit entries; statistics start at `N = 1`, `m = e`.
    pub fn from_entries(entries: Vec<Tensor>, decay: f64, smoothing_eps: f64) -> Result<Self> {
        let levels = entries
            .into_iter()
            .map(|e| CodebookLevel { cluster_size: vec![1.0; e.rows], embed_sum: e.clone(), entries: e })
            .collect();
        Self::from_levels(levels, decay, smoothing_eps)
    }

    pub fn from_levels(levels: Vec<CodebookLevel>, decay: f64, smoothing_eps: f64) -> Result<Self> {
        check_hyper(decay, smoothing_eps)?;
        let dim = levels.first().map(|l| l.entries.cols).ok_or_else(|| config_err!("codebook needs at least one level"))?;
        if dim == 0 {
            return Err(config_err!("codebook dimension must be positive"));
        }
        for (i, l) in levels.iter().enumerate() {
            if l.entries.rows == 0 {
                return Err(config_err!("level {i} has no entries"));
            }
            if l.entries.cols != dim || l.embed_sum.shape() != l.entries.shape() || l.cluster_size.len() != l.entries.rows {
                return Err(config_err!("level {i} statistics do not match {} × {}", l.entries.rows, dim));
            }
            if !l.entries.is_finite() || !l.embed_sum.is_finite() || l.cluster_size.iter().any(|n| !n.is_finite() || *n < 0.0) {
                return Err(config_err!("level {i} contains invalid values"));
            }
        }
        Ok(Self { levels, dim, decay, smoothing_eps })
    }

    /// Seeds every level with `K` distinct vectors sampled from the first
    /// batch: level 0 from the projected features, deeper levels from the
    /// residuals left by the already-seeded levels. When a batch has fewer
    /// than `K` distinct rows the remaining entries repeat sampled rows and
    /// will be picked up by dead-entry reinitialization.
    pub fn init_from_batch<R: Rng + ?Sized>(
        sizes: &[usize],
        proj: &Projection,
        features: &Tensor,
        decay: f64,
        smoothing_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_hyper(decay, smoothing_eps)?;
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(config_err!("codebook sizes {sizes:?} must be non-empty and positive"));
        }
        if features.rows == 0 {
            return Err(config_err!("cannot initialize a codebook from an empty batch"));
        }
        let mut residual = proj.apply(features)?;
        let d = residual.cols;
        let mut levels = Vec::with_capacity(sizes.len());
        for &k in sizes {
            let entries = sample_distinct_rows(&residual, k, rng);
            let level = CodebookLevel { cluster_size: vec![1.0; k], embed_sum: entries.clone(), entries };
            for p in 0..residual.rows {
                let j = level.nearest(residual.row(p));
                let e = level.entries.row(j).to_vec();
                for (r, ev) in residual.row_mut(p).iter_mut().zip(e) {
                    *r -= ev;
                }
            }
            levels.push(level);
        }
        let cb = Self { levels, dim: d, decay, smoothing_eps };
        Ok(cb)
    }

    pub fn levels(&self) -> &[CodebookLevel] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(CodebookLevel::size).collect()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.smoothing_eps
    }

    pub fn set_decay(&mut self, decay: f64) -> Result<()> {
        check_hyper(decay, self.smoothing_eps)?;
        self.decay = decay;
        Ok(())
    }

    pub fn entry(&self, level: usize, k: usize) -> &[f64] {
        self.levels[level].entries.row(k)
    }

    /// One EMA step from the assignments recorded in `result`.
    ///
    /// `N_k ← γN_k + (1−γ)|S_k|`, `m_k ← γm_k + (1−γ)Σ r_j`, then entries whose
    /// smoothed size falls below 1 are re-seeded from a uniformly drawn residual
    /// of this batch (with `N = 1`, `m = e`); all others become `m_k / N̂_k`.
    pub fn ema_update<R: Rng + ?Sized>(&mut self, result: &QuantizeResult, rng: &mut R) -> Result<EmaReport> {
        check_hyper(self.decay, self.smoothing_eps)?;
        let grid = &result.token_grid;
        if grid.n_levels() != self.n_levels() || result.residuals.len() != self.n_levels() + 1 {
            return Err(config_err!("quantize result has {} levels, codebook {}", grid.n_levels(), self.n_levels()));
        }
        grid.validate(&self.sizes()).map_err(|e| config_err!("{e}"))?;
        let n = grid.n_positions();
        if n == 0 {
            return Ok(EmaReport { empty_batch: true, levels: Vec::new() });
        }
        let (gamma, eps, d) = (self.decay, self.smoothing_eps, self.dim);
        let mut report = EmaReport::default();
        for (l, level) in self.levels.iter_mut().enumerate() {
            let inputs = &result.residuals[l];
            if inputs.shape() != (n, d) {
                return Err(config_err!("residuals at level {l} have shape {:?}", inputs.shape()));
            }
            let k = level.size();
            let mut counts = vec![0usize; k];
            let mut sums = Tensor::zeros(k, d);
            for p in 0..n {
                let j = grid.get(p, l) as usize;
                counts[j] += 1;
                for (s, &r) in sums.row_mut(j).iter_mut().zip(inputs.row(p)) {
                    *s += r;
                }
            }
            for j in 0..k {
                level.cluster_size[j] = gamma * level.cluster_size[j] + (1.0 - gamma) * counts[j] as f64;
                for (m, &s) in level.embed_sum.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *m = gamma * *m + (1.0 - gamma) * s;
                }
            }
            let smoothed = level.smoothed_sizes(eps);
            let mut reinitialized = 0;
            for j in 0..k {
                if smoothed[j] < 1.0 {
                    let src = rng.gen_range(0..n);
                    level.entries.row_mut(j).copy_from_slice(inputs.row(src));
                    level.embed_sum.row_mut(j).copy_from_slice(inputs.row(src));
                    level.cluster_size[j] = 1.0;
                    reinitialized += 1;
                } else {
                    let ns = smoothed[j];
                    let (e, m) = (level.entries.row_mut(j), level.embed_sum.row(j));
                    for (ev, &mv) in e.iter_mut().zip(m) {
                        *ev = mv / ns;
                    }
                }
            }
            let used = counts.iter().filter(|&&c| c > 0).count();
            let entropy: f64 = counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    -p * crate::math::ln(p)
                })
                .sum();
            report.levels.push(LevelReport { used, reinitialized, perplexity: crate::math::exp(entropy) });
        }
        Ok(report)
    }
}

fn sample_distinct_rows<R: Rng + ?Sized>(x: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = x.rows;
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&c| x.row(c) != x.row(i)) {
            chosen.push(i);
        }
    }
    let mut fill = 0;
    while chosen.len() < k {
        chosen.push(order[fill % n]);
        fill += 1;
    }
    x.select_rows(&chosen)
}
