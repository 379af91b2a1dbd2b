use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{LossReport, ToyConfig, ToyModel};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Adam, ParamStore};
use crate::seqcodec::PackedSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub seed: u64,
    /// Keep weights and moments on the `f32` grid so checkpoints are exact.
    pub f32_master: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 3e-4, seed: 0, f32_master: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossReport,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ToyModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub train: TrainConfig,
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(cfg: &ToyConfig, train: TrainConfig) -> Result<Self> {
        if !(train.lr >= 0.0) || !train.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", train.lr)));
        }
        let (model, mut store) = ToyModel::new(cfg, train.seed)?;
        if train.f32_master {
            store.round_f32();
        }
        let mut adam = Adam::new(&store, train.lr);
        adam.f32_master = train.f32_master;
        Ok(Self { model, store, adam, train, history: Vec::new() })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One Adam step on `batch`. The batch may hold many packed samples;
    /// attention never crosses them.
    pub fn train_step(&mut self, batch: &PackedSequence) -> Result<StepReport> {
        let step = self.step();
        let mut g = Graph::new();
        let (loss, report) = self.model.loss_graph(&mut g, &self.store, batch)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("text loss {} depth loss {}; {}", report.text, report.depth, self.diagnose()),
            });
        }
        let grads = g.backward(loss).for_params(&self.store);
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            let name = self.store.iter().nth(i).map(|(_, n, _)| n).unwrap_or("?");
            return Err(Error::NonFinite { step, detail: format!("gradient of {name} is not finite") });
        }
        let lr = self.train.lr;
        self.adam.update(&mut self.store, &grads, lr);
        self.history.push(report.total);
        Ok(StepReport { step, loss: report })
    }

    fn diagnose(&self) -> String {
        match self.store.iter().find(|(_, _, t)| !t.is_finite()) {
            Some((_, n, _)) => format!("parameter {n} holds non-finite values"),
            None => String::from("all parameters finite"),
        }
    }

    /// Which batch step `step` trains on; depends only on `(seed, step)`.
    pub fn batch_index(&self, n_batches: usize) -> usize {
        math::rng_for(self.train.seed, self.step()).gen_range(0..n_batches)
    }

    pub fn train(&mut self, data: &[PackedSequence], steps: usize) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::Input("no training sequences".into()));
        }
        (0..steps).map(|_| self.train_step(&data[self.batch_index(data.len())])).collect()
    }

    /// Named tensors for a checkpoint: parameters, Adam moments and metadata.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (_, name, t) in self.store.iter() {
            out.push((String::from(name), t.clone()));
        }
        for (i, (_, name, _)) in self.store.iter().enumerate() {
            out.push((format!("adam.m/{name}"), self.adam.m[i].clone()));
            out.push((format!("adam.v/{name}"), self.adam.v[i].clone()));
        }
        out.push(("meta.config".into(), words_to_tensor(&self.model.cfg.to_words())));
        let t = &self.train;
        out.push((
            "meta.train".into(),
            words_to_tensor(&[self.step(), t.lr.to_bits(), t.seed, t.f32_master as u64]),
        ));
        out.push(("meta.history".into(), Tensor::from_vec(1, self.history.len(), self.history.clone())));
        out
    }

    pub fn from_tensors(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Decode(format!("checkpoint lacks {name}")))
        };
        let cfg = ToyConfig::from_words(&tensor_to_words(find("meta.config")?)?)?;
        let meta = tensor_to_words(find("meta.train")?)?;
        if meta.len() != 4 {
            return Err(Error::Decode("malformed training record".into()));
        }
        let train = TrainConfig { lr: f64::from_bits(meta[1]), seed: meta[2], f32_master: meta[3] != 0 };
        let (model, mut store) = ToyModel::new(&cfg, train.seed)?;
        let mut adam = Adam::new(&store, train.lr);
        adam.f32_master = train.f32_master;
        adam.step = meta[0];
        let names: Vec<String> = store.iter().map(|(_, n, _)| String::from(n)).collect();
        for (i, name) in names.iter().enumerate() {
            let id = store.id(name).expect("own name");
            let put = |dst: &mut Tensor, src: &Tensor, what: &str| {
                if dst.shape() != src.shape() {
                    return Err(Error::Decode(format!("{what} has shape {:?}, expected {:?}", src.shape(), dst.shape())));
                }
                *dst = src.clone();
                Ok(())
            };
            put(store.get_mut(id), find(name)?, name)?;
            put(&mut adam.m[i], find(&format!("adam.m/{name}"))?, name)?;
            put(&mut adam.v[i], find(&format!("adam.v/{name}"))?, name)?;
        }
        let history = find("meta.history")?.data.clone();
        Ok(Self { model, store, adam, train, history })
    }
}

/// `u64` words as 16-bit chunks, each exactly representable in `f32`.
pub fn words_to_tensor(words: &[u64]) -> Tensor {
    let data: Vec<f64> = words.iter().flat_map(|&w| (0..4).map(move |i| ((w >> (16 * i)) & 0xffff) as f64)).collect();
    Tensor::from_vec(1, data.len(), data)
}

pub fn tensor_to_words(t: &Tensor) -> Result<Vec<u64>> {
    if t.len() % 4 != 0 {
        return Err(Error::Decode("word tensor length not a multiple of 4".into()));
    }
    t.data
        .chunks(4)
        .map(|c| {
            let mut w = 0u64;
            for (i, &v) in c.iter().enumerate() {
                if !(0.0..65536.0).contains(&v) || (v as u64) as f64 != v {
                    return Err(Error::Decode(format!("invalid word chunk {v}")));
                }
                w |= (v as u64) << (16 * i);
            }
            Ok(w)
        })
        .collect()
}

/// A fixed set of `n` mixed-modality samples packed into one sequence.
///
/// Each sample opens with its own id as a text token, so every later token
/// is a deterministic function of the sample and the set can be memorized.
pub fn memorization_batch(vocab: &crate::seqcodec::Vocab, n: usize, seed: u64) -> Result<PackedSequence> {
    use crate::rvq::TokenGrid;
    use crate::seqcodec::{layout_sample, sample_delay, GuideMode, LaidOutSample, Segment};
    if n > vocab.plain() {
        return Err(Error::Config(format!("{n} samples need {n} distinct prompt ids, vocabulary has {}", vocab.plain())));
    }
    let mut rng = math::rng(seed);
    let l = vocab.n_levels();
    let frames = |count: usize, rng: &mut math::SeededRng| {
        let t = (0..count * l).map(|i| rng.gen_range(0..vocab.levels[i % l]) as u32).collect();
        TokenGrid::flat(t, l).expect("consistent")
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let text: Vec<u32> = (0..3).map(|_| rng.gen_range(0..vocab.plain()) as u32).collect();
        let body = match i % 4 {
            0 => Segment::text(text, true),
            1 => {
                let delay = sample_delay(text.len(), &mut rng)?;
                Segment::text_guided(text, frames(4, &mut rng), delay, GuideMode::Parallel, true)
            }
            2 => Segment::pure_audio(frames(4, &mut rng), true),
            _ => {
                let g = frames(4, &mut rng);
                Segment::vision(TokenGrid::new(g.tokens().to_vec(), l, alloc::vec![2, 2])?, true)
            }
        };
        let steps = layout_sample(&[Segment::text(alloc::vec![i as u32], false), body], vocab)?;
        samples.push(LaidOutSample { id: i as u32, kind: None, steps });
    }
    let mut packed = crate::seqcodec::pack(samples, usize::MAX)?;
    Ok(packed.remove(0))
}
