use alloc::vec::Vec;

use rand::Rng;

use super::{quantization_loss, quantize, Codebook, EmaReport, Projection};
use crate::autograd::Graph;
use crate::error::{config_err, Error, Result};
use crate::math;
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RvqTrainConfig {
    pub sizes: Vec<usize>,
    /// Codebook width `d`.
    pub dim: usize,
    pub decay: f64,
    pub smoothing_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Train the projection and the semantic decoder with the quantization loss.
    pub learn_projection: bool,
    pub lambda_commit: f64,
    pub lambda_semantic: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        Self {
            sizes: alloc::vec![64, 32, 16, 16],
            dim: 16,
            decay: super::DEFAULT_DECAY,
            smoothing_eps: super::DEFAULT_SMOOTHING_EPS,
            steps: 200,
            batch_size: 256,
            learn_projection: true,
            lambda_commit: 0.25,
            lambda_semantic: 1.0,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// A trained tokenizer: projection, codebook and the semantic decoder used to supervise the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqModel {
    pub projection: Projection,
    pub codebook: Codebook,
    /// Affine map from the quantized space back to the input features.
    pub semantic_decoder: Projection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqStepReport {
    pub step: usize,
    pub commit: f64,
    pub semantic: f64,
    pub loss: f64,
    pub reconstruction_mse: f64,
    pub ema: EmaReport,
}

fn sample_batch<R: Rng + ?Sized>(data: &Tensor, batch: usize, rng: &mut R) -> Tensor {
    if batch >= data.rows {
        return data.clone();
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..data.rows)).collect();
    data.select_rows(&idx)
}

/// Mean `‖x − ẑ‖²` between the projected features and their reconstruction.
pub(crate) fn reconstruction_mse(r0: &Tensor, zhat: &Tensor) -> f64 {
    if r0.rows == 0 {
        return 0.0;
    }
    r0.data.iter().zip(&zhat.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r0.rows as f64
}

/// Trains codebooks with EMA updates and, optionally, the projection and semantic
/// decoder by Adam on `λ_c·L_commit + λ_s·L_semantic` with a straight-through
/// estimator for the quantizer.
pub fn train_rvq(data: &Tensor, cfg: &RvqTrainConfig) -> Result<(RvqModel, Vec<RvqStepReport>)> {
    if data.rows == 0 || data.cols == 0 {
        return Err(config_err!("training data is empty"));
    }
    if !data.is_finite() {
        return Err(Error::Input("training data contains non-finite values".into()));
    }
    if cfg.batch_size == 0 {
        return Err(config_err!("batch_size must be positive"));
    }
    let d_in = data.cols;
    let mut rng = math::rng(cfg.seed);
    let projection = Projection::init(d_in, cfg.dim, &mut rng);
    let semantic_decoder = Projection::init(cfg.dim, d_in, &mut rng);

    let mut store = ParamStore::new();
    let pw = store.add("proj.weight", projection.weight.clone());
    let pb = store.add("proj.bias", projection.bias.clone());
    let dw = store.add("sem_dec.weight", semantic_decoder.weight.clone());
    let db = store.add("sem_dec.bias", semantic_decoder.bias.clone());
    let mut adam = Adam::new(&store, cfg.lr);

    let first = sample_batch(data, cfg.batch_size, &mut rng);
    let mut codebook = Codebook::init_from_batch(&cfg.sizes, &projection, &first, cfg.decay, cfg.smoothing_eps, &mut rng)?;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = if step == 0 { first.clone() } else { sample_batch(data, cfg.batch_size, &mut rng) };
        let proj = Projection::new(store.get(pw).clone(), store.get(pb).clone())?;
        let dec = Projection::new(store.get(dw).clone(), store.get(db).clone())?;
        let result = quantize(&batch, &codebook, &proj)?;
        let decoded = dec.apply(&result.quantized)?;
        let loss = quantization_loss(&result, &batch, &decoded, cfg.lambda_commit, cfg.lambda_semantic)?;
        let mse = reconstruction_mse(&result.residuals[0], &result.quantized);

        if cfg.learn_projection {
            let grads = quant_loss_grads(&store, &batch, &result, cfg, [pw, pb, dw, db]);
            adam.update(&mut store, &grads, cfg.lr);
        }
        let ema = codebook.ema_update(&result, &mut rng)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite { step: step as u64, detail: alloc::format!("{loss:?}") });
        }
        history.push(RvqStepReport {
            step,
            commit: loss.commit,
            semantic: loss.semantic,
            loss: loss.value,
            reconstruction_mse: mse,
            ema,
        });
    }
    let model = RvqModel {
        projection: Projection::new(store.get(pw).clone(), store.get(pb).clone())?,
        codebook,
        semantic_decoder: Projection::new(store.get(dw).clone(), store.get(db).clone())?,
    };
    Ok((model, history))
}

fn quant_loss_grads(
    store: &ParamStore,
    batch: &Tensor,
    result: &super::QuantizeResult,
    cfg: &RvqTrainConfig,
    ids: [crate::params::ParamId; 4],
) -> Vec<Tensor> {
    let [pw, pb, dw, db] = ids;
    let n = batch.rows;
    let n_levels = result.token_grid.n_levels();
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let w = g.param(store, pw);
    let b = g.param(store, pb);
    let r0 = g.matmul(x, w);
    let r0 = g.add_row(r0, b);

    // r_{l-1} − e_l = r0 − (Σ_{j<=l} e_j), with the codebook side held constant.
    let mut commit_terms = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let target = {
            let mut t = result.residuals[0].clone();
            let rl = &result.residuals[l + 1];
            for (tv, rv) in t.data.iter_mut().zip(&rl.data) {
                *tv -= rv;
            }
            t
        };
        commit_terms.push(g.squared_error(r0, target));
    }
    let mut commit = commit_terms[0];
    for &t in &commit_terms[1..] {
        commit = g.add(commit, t);
    }
    let commit = g.scale(commit, cfg.lambda_commit / (n * n_levels) as f64);

    let mut offset = result.quantized.clone();
    for (o, r) in offset.data.iter_mut().zip(&result.residuals[0].data) {
        *o -= r;
    }
    let offset = g.constant(offset);
    let z_st = g.add(r0, offset);
    let dwv = g.param(store, dw);
    let dbv = g.param(store, db);
    let dec = g.matmul(z_st, dwv);
    let dec = g.add_row(dec, dbv);
    let cos = g.cosine_rows(dec, batch.clone());
    let cos_sum = g.sum(cos);
    let semantic = g.scale(cos_sum, -cfg.lambda_semantic / n as f64);
    let total = g.add(commit, semantic);
    g.backward(total).for_params(store)
}
