use alloc::vec::Vec;

use super::train::reconstruction_mse;
use super::{quantize_projected, Codebook, Projection};
use crate::error::{config_err, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Single codebook.
    Vq,
    /// Residual cascade.
    Rvq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Entries per level, shared by every configuration.
    pub codebook_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub decay: f64,
    pub smoothing_eps: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            codebook_size: 16,
            steps: 300,
            batch_size: 256,
            decay: super::DEFAULT_DECAY,
            smoothing_eps: super::DEFAULT_SMOOTHING_EPS,
            eval_every: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub strategy: Strategy,
    pub levels: usize,
    /// `(step, mse)` evaluated on the full data set.
    pub curve: Vec<(usize, f64)>,
    pub final_mse: f64,
}

/// Trains one codebook per `(strategy, L)` on identical data, seed and update
/// budget (identity projection, EMA updates only) and reports the feature
/// reconstruction MSE `mean ‖x − ẑ‖²` along the way.
pub fn level_sweep_report(data: &Tensor, configs: &[(Strategy, usize)], cfg: &SweepConfig) -> Result<Vec<SweepPoint>> {
    if data.rows == 0 {
        return Err(config_err!("sweep data is empty"));
    }
    let mut out = Vec::with_capacity(configs.len());
    for &(strategy, levels) in configs {
        if levels == 0 || (strategy == Strategy::Vq && levels != 1) {
            return Err(config_err!("{strategy:?} with {levels} levels is not a valid configuration"));
        }
        let mut rng = math::rng(cfg.seed);
        let proj = Projection::identity(data.cols);
        let sizes = alloc::vec![cfg.codebook_size; levels];
        let batches: Vec<Tensor> = (0..cfg.steps.max(1)).map(|_| batch(data, cfg.batch_size, &mut rng)).collect();
        let mut cb = Codebook::init_from_batch(&sizes, &proj, &batches[0], cfg.decay, cfg.smoothing_eps, &mut rng)?;
        let mut curve = Vec::new();
        for (step, b) in batches.iter().enumerate().take(cfg.steps) {
            let res = quantize_projected(b.clone(), &cb);
            cb.ema_update(&res, &mut rng)?;
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                curve.push((step + 1, eval(data, &cb)));
            }
        }
        let final_mse = eval(data, &cb);
        out.push(SweepPoint { strategy, levels, curve, final_mse });
    }
    Ok(out)
}

fn eval(data: &Tensor, cb: &Codebook) -> f64 {
    let res = quantize_projected(data.clone(), cb);
    reconstruction_mse(data, &res.quantized)
}

fn batch<R: rand::Rng + ?Sized>(data: &Tensor, size: usize, rng: &mut R) -> Tensor {
    if size >= data.rows {
        return data.clone();
    }
    let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..data.rows)).collect();
    data.select_rows(&idx)
}
