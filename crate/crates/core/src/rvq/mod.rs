//! Residual vector quantization with EMA-learned codebooks.
//!
//! A feature vector is first mapped by an affine [`Projection`]; each of the
//! `L` levels then picks the entry nearest (squared Euclidean, lowest index on
//! ties) to the residual left by the previous levels. The decoded vector is the
//! sum of the selected entries.

mod codebook;
mod sweep;
mod train;

pub use codebook::{Codebook, CodebookLevel, EmaReport, LevelReport, DEFAULT_DECAY, DEFAULT_SMOOTHING_EPS};
pub use sweep::{level_sweep_report, Strategy, SweepConfig, SweepPoint};
pub use train::{train_rvq, RvqModel, RvqStepReport, RvqTrainConfig};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, input_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Multi-level token indices for `n_positions` positions, stored position-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    tokens: Vec<u32>,
    n_levels: usize,
    shape: Vec<usize>,
}

impl TokenGrid {
    /// `tokens` is `n_positions × n_levels`, row-major. `shape` must multiply to `n_positions`.
    pub fn new(tokens: Vec<u32>, n_levels: usize, shape: Vec<usize>) -> Result<Self> {
        if n_levels == 0 {
            return Err(config_err!("token grid needs at least one level"));
        }
        if tokens.len() % n_levels != 0 {
            return Err(config_err!("{} tokens do not divide into {} levels", tokens.len(), n_levels));
        }
        let n = tokens.len() / n_levels;
        let prod: usize = shape.iter().product();
        if shape.is_empty() || prod != n {
            return Err(config_err!("shape {:?} does not cover {} positions", shape, n));
        }
        Ok(Self { tokens, n_levels, shape })
    }

    /// Flat grid with shape `[n_positions]`.
    pub fn flat(tokens: Vec<u32>, n_levels: usize) -> Result<Self> {
        let n = if n_levels == 0 { 0 } else { tokens.len() / n_levels };
        Self::new(tokens, n_levels, vec![n])
    }

    pub fn from_positions(rows: &[Vec<u32>]) -> Result<Self> {
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(config_err!("ragged token rows"));
        }
        Self::flat(rows.concat(), l)
    }

    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.n_positions() || shape.is_empty() {
            return Err(config_err!("shape {:?} does not cover {} positions", shape, self.n_positions()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn n_positions(&self) -> usize {
        self.tokens.len() / self.n_levels
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, p: usize, l: usize) -> u32 {
        self.tokens[p * self.n_levels + l]
    }

    pub fn set(&mut self, p: usize, l: usize, v: u32) {
        self.tokens[p * self.n_levels + l] = v;
    }

    pub fn position(&self, p: usize) -> &[u32] {
        &self.tokens[p * self.n_levels..(p + 1) * self.n_levels]
    }

    pub fn positions(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.n_levels)
    }

    /// Checks `0 <= idx[p][l] < sizes[l]`.
    pub fn validate(&self, sizes: &[usize]) -> Result<()> {
        if sizes.len() != self.n_levels {
            return Err(Error::Decode(format!("grid has {} levels, codebook {}", self.n_levels, sizes.len())));
        }
        for (p, row) in self.positions().enumerate() {
            for (l, (&t, &k)) in row.iter().zip(sizes).enumerate() {
                if t as usize >= k {
                    return Err(Error::Decode(format!("token {t} at position {p} level {l} out of range {k}")));
                }
            }
        }
        Ok(())
    }
}

/// Affine map from input features to the codebook space, `r0 = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if bias.shape() != (1, weight.cols) {
            return Err(config_err!("projection bias {:?} does not match width {}", bias.shape(), weight.cols));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        Self { weight: Tensor::identity(d), bias: Tensor::zeros(1, d) }
    }

    /// Identity when `d_in == d`, otherwise Gaussian with variance `1/d_in`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d: usize, rng: &mut R) -> Self {
        if d_in == d {
            return Self::identity(d);
        }
        Self { weight: Tensor::randn(d_in, d, 1.0 / math::sqrt(d_in as f64), rng), bias: Tensor::zeros(1, d) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols != self.d_in() {
            return Err(config_err!("features have {} columns, projection expects {}", x.cols, self.d_in()));
        }
        let mut out = x.matmul(&self.weight);
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub token_grid: TokenGrid,
    /// `ẑ`, one row per position.
    pub quantized: Tensor,
    /// `residuals[l]` is the input to level `l` (so `residuals[0]` is the
    /// projected feature); the last entry is the final residual. `L + 1` tensors.
    pub residuals: Vec<Tensor>,
    pub commit_loss: f64,
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy per-level nearest-neighbour encoding.
pub fn quantize(features: &Tensor, cb: &Codebook, proj: &Projection) -> Result<QuantizeResult> {
    if proj.d_out() != cb.dim() {
        return Err(config_err!("projection width {} does not match codebook dim {}", proj.d_out(), cb.dim()));
    }
    if !features.is_finite() {
        return Err(input_err!("features contain non-finite values"));
    }
    let r0 = proj.apply(features)?;
    Ok(quantize_projected(r0, cb))
}

/// Same as [`quantize`] on already projected vectors.
pub fn quantize_projected(r0: Tensor, cb: &Codebook) -> QuantizeResult {
    let n = r0.rows;
    let d = cb.dim();
    let n_levels = cb.n_levels();
    let mut tokens = vec![0u32; n * n_levels];
    let mut quantized = Tensor::zeros(n, d);
    let mut residuals = Vec::with_capacity(n_levels + 1);
    let mut commit = 0.0;
    residuals.push(r0);
    for (l, level) in cb.levels().iter().enumerate() {
        let prev = &residuals[l];
        let mut next = prev.clone();
        for p in 0..n {
            let r = prev.row(p);
            let k = level.nearest(r);
            tokens[p * n_levels + l] = k as u32;
            let e = level.entries.row(k);
            commit += squared_distance(r, e);
            for ((q, nx), &ev) in quantized.row_mut(p).iter_mut().zip(next.row_mut(p)).zip(e) {
                *q += ev;
                *nx -= ev;
            }
        }
        residuals.push(next);
    }
    let commit_loss = if n == 0 { 0.0 } else { commit / (n * n_levels) as f64 };
    let token_grid = TokenGrid::flat(tokens, n_levels).expect("grid dimensions are consistent");
    QuantizeResult { token_grid, quantized, residuals, commit_loss }
}

/// Sum of the selected entries per position.
pub fn dequantize(grid: &TokenGrid, cb: &Codebook) -> Result<Tensor> {
    grid.validate(&cb.sizes())?;
    let mut out = Tensor::zeros(grid.n_positions(), cb.dim());
    for (p, row) in grid.positions().enumerate() {
        for (level, &t) in cb.levels().iter().zip(row) {
            for (o, &e) in out.row_mut(p).iter_mut().zip(level.entries.row(t as usize)) {
                *o += e;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantLoss {
    pub value: f64,
    pub commit: f64,
    pub semantic: f64,
    /// Some row of the cosine term had zero norm and was scored as similarity 0.
    pub degenerate: bool,
}

/// `λ_c · commit + λ_s · mean(1 − cos(decoded_p, target_p))`.
pub fn quantization_loss(
    result: &QuantizeResult,
    sem_target: &Tensor,
    sem_decoder_output: &Tensor,
    lambda_commit: f64,
    lambda_semantic: f64,
) -> Result<QuantLoss> {
    if sem_target.shape() != sem_decoder_output.shape() {
        return Err(config_err!(
            "semantic target {:?} and decoder output {:?} differ in shape",
            sem_target.shape(),
            sem_decoder_output.shape()
        ));
    }
    if sem_target.rows != result.quantized.rows {
        return Err(config_err!("semantic rows {} do not match {} positions", sem_target.rows, result.quantized.rows));
    }
    let n = sem_target.rows;
    let mut degenerate = false;
    let mut total = 0.0;
    for p in 0..n {
        let (a, b) = (sem_decoder_output.row(p), sem_target.row(p));
        let na = math::sqrt(a.iter().map(|v| v * v).sum());
        let nb = math::sqrt(b.iter().map(|v| v * v).sum());
        let cos = if na == 0.0 || nb == 0.0 {
            degenerate = true;
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        total += 1.0 - cos;
    }
    let semantic = if n == 0 { 0.0 } else { total / n as f64 };
    Ok(QuantLoss {
        value: lambda_commit * result.commit_loss + lambda_semantic * semantic,
        commit: result.commit_loss,
        semantic,
        degenerate,
    })
}

/// Stand-in for encoder features: a three-tier Gaussian hierarchy
/// (coarse centers, finer offsets, isotropic noise) so that every extra
/// quantization level has structure left to capture.
pub fn synthetic_features(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = math::rng(seed);
    let coarse: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| 2.0 * math::gaussian(&mut rng)).collect()).collect();
    let fine: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| 0.5 * math::gaussian(&mut rng)).collect()).collect();
    let mut out = Tensor::zeros(n, d);
    for i in 0..n {
        let (a, b) = (rng.gen_range(0..coarse.len()), rng.gen_range(0..fine.len()));
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = coarse[a][j] + fine[b][j] + 0.1 * math::gaussian(&mut rng);
        }
    }
    out
}
