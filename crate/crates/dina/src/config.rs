//! TOML run configuration. Every section is optional; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dina_core::grpo::GrpoConfig;
use dina_core::recon_probe::{DecoderConfig, EncoderConfig, EncoderKind, ProbeConfig};
use dina_core::rvq::{RvqTrainConfig, SweepConfig};
use dina_core::seqcodec::{DatasetConfig, Mix, Vocab};
use dina_core::toy_model::{ToyConfig, TrainConfig};

pub const SEED_ENV: &str = "DINA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub rvq: RvqSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub grpo: GrpoSection,
    pub sim: SimSection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            rvq: Default::default(),
            data: Default::default(),
            model: Default::default(),
            train: Default::default(),
            grpo: Default::default(),
            sim: Default::default(),
            probe: Default::default(),
            sweep: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqSection {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub decay: f64,
    pub smoothing_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learn_projection: bool,
    pub lambda_commit: f64,
    pub lambda_semantic: f64,
    pub lr: f64,
}

impl Default for RvqSection {
    fn default() -> Self {
        let c = RvqTrainConfig::default();
        Self {
            sizes: c.sizes,
            dim: c.dim,
            decay: c.decay,
            smoothing_eps: c.smoothing_eps,
            steps: c.steps,
            batch_size: c.batch_size,
            learn_projection: c.learn_projection,
            lambda_commit: c.lambda_commit,
            lambda_semantic: c.lambda_semantic,
            lr: c.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub text_vocab: usize,
    pub levels: Vec<usize>,
    pub n_samples: usize,
    pub text_len: [usize; 2],
    pub audio_len: [usize; 2],
    pub segments: [usize; 2],
    pub max_seq_len: usize,
    /// Sample kind name to percentage.
    pub mix: BTreeMap<String, f64>,
    /// Synthetic feature set written next to the shards.
    pub n_features: usize,
    pub feature_dim: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = DatasetConfig::default();
        Self {
            text_vocab: c.vocab.text,
            levels: c.vocab.levels,
            n_samples: c.n_samples,
            text_len: [c.text_len.0, c.text_len.1],
            audio_len: [c.audio_len.0, c.audio_len.1],
            segments: [c.segments.0, c.segments.1],
            max_seq_len: c.max_seq_len,
            mix: Mix::default().entries().iter().map(|(k, w)| (k.name().to_string(), *w)).collect(),
            n_features: 2048,
            feature_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub prebuffer_hidden: usize,
    pub depth_width: usize,
    pub depth_layers: usize,
    pub depth_heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ToyConfig::default();
        Self {
            hidden: c.hidden,
            layers: c.layers,
            heads: c.heads,
            ffn_hidden: c.ffn_hidden,
            prebuffer_hidden: c.prebuffer_hidden,
            depth_width: c.depth_width,
            depth_layers: c.depth_layers,
            depth_heads: c.depth_heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub f32_master: bool,
    /// Shard to train on; relative paths resolve against the config file.
    pub data: Option<PathBuf>,
    /// Resume from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self { steps: 500, lr: c.lr, f32_master: c.f32_master, data: None, resume: None, checkpoint: None, log_every: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub clip_eps: f64,
    pub level_weights: Option<Vec<f64>>,
    pub entropy_n: f64,
    pub delta: f64,
    pub group_size: usize,
}

impl Default for GrpoSection {
    fn default() -> Self {
        let c = GrpoConfig::default();
        Self { clip_eps: c.clip_eps, level_weights: c.level_weights, entropy_n: c.entropy_n, delta: c.delta, group_size: c.group_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub timeline_width: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { timeline_width: 80 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub encoder: String,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub ridge: f64,
    pub decoder_hidden: usize,
    pub refine_steps: usize,
    pub lr: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let c = ProbeConfig::default();
        Self {
            encoder: c.encoder.kind.name().to_string(),
            patch: c.encoder.patch,
            width: c.encoder.width,
            blocks: c.encoder.blocks,
            hidden: c.encoder.hidden,
            ridge: c.decoder.ridge,
            decoder_hidden: c.decoder.hidden,
            refine_steps: c.decoder.refine_steps,
            lr: c.decoder.lr,
            n_train: c.n_train,
            n_test: c.n_test,
            image_size: c.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Configurations as `"vq-1"`, `"rvq-8"` and so on.
    pub configs: Vec<String>,
    pub codebook_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let c = SweepConfig::default();
        Self {
            configs: ["vq-1", "rvq-2", "rvq-4", "rvq-8"].map(String::from).to_vec(),
            codebook_size: c.codebook_size,
            steps: c.steps,
            batch_size: c.batch_size,
            eval_every: c.eval_every,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` (defaults when `None`), applies `DINA_SEED` and resolves
    /// relative paths inside the file against its directory.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new(""));
                for slot in [&mut cfg.train.data, &mut cfg.train.resume, &mut cfg.train.checkpoint] {
                    if let Some(rel) = slot.as_mut().filter(|q| q.is_relative()) {
                        *rel = base.join(&*rel);
                    }
                }
                if cfg.out_dir.is_relative() {
                    cfg.out_dir = base.join(&cfg.out_dir);
                }
                cfg
            }
            None => Self::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    pub fn resolved(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unserializable config: {e}>"))
    }

    pub fn vocab(&self) -> anyhow::Result<Vocab> {
        Ok(Vocab::new(self.data.text_vocab, self.data.levels.clone())?)
    }

    pub fn mix(&self) -> anyhow::Result<Mix> {
        Ok(Mix::from_names(self.data.mix.iter().map(|(k, v)| (k.as_str(), *v)))?)
    }

    pub fn dataset(&self) -> anyhow::Result<DatasetConfig> {
        let d = &self.data;
        Ok(DatasetConfig {
            vocab: self.vocab()?,
            n_samples: d.n_samples,
            text_len: (d.text_len[0], d.text_len[1]),
            audio_len: (d.audio_len[0], d.audio_len[1]),
            segments: (d.segments[0], d.segments[1]),
            max_seq_len: d.max_seq_len,
            seed: self.seed,
        })
    }

    pub fn rvq_train(&self) -> RvqTrainConfig {
        let r = &self.rvq;
        RvqTrainConfig {
            sizes: r.sizes.clone(),
            dim: r.dim,
            decay: r.decay,
            smoothing_eps: r.smoothing_eps,
            steps: r.steps,
            batch_size: r.batch_size,
            learn_projection: r.learn_projection,
            lambda_commit: r.lambda_commit,
            lambda_semantic: r.lambda_semantic,
            lr: r.lr,
            seed: self.seed,
        }
    }

    pub fn toy(&self) -> ToyConfig {
        let m = &self.model;
        ToyConfig {
            text_vocab: self.data.text_vocab,
            levels: self.data.levels.clone(),
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            prebuffer_hidden: m.prebuffer_hidden,
            depth_width: m.depth_width,
            depth_layers: m.depth_layers,
            depth_heads: m.depth_heads,
            max_seq_len: self.data.max_seq_len,
        }
    }

    pub fn toy_train(&self) -> TrainConfig {
        TrainConfig { lr: self.train.lr, seed: self.seed, f32_master: self.train.f32_master }
    }

    pub fn grpo(&self) -> anyhow::Result<GrpoConfig> {
        let g = &self.grpo;
        let cfg = GrpoConfig {
            clip_eps: g.clip_eps,
            level_weights: g.level_weights.clone(),
            entropy_n: g.entropy_n,
            delta: g.delta,
            group_size: g.group_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe(&self) -> anyhow::Result<ProbeConfig> {
        let p = &self.probe;
        Ok(ProbeConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::parse(&p.encoder)?,
                patch: p.patch,
                width: p.width,
                blocks: p.blocks,
                hidden: p.hidden,
                seed: self.seed,
            },
            decoder: DecoderConfig { ridge: p.ridge, hidden: p.decoder_hidden, refine_steps: p.refine_steps, lr: p.lr, seed: self.seed },
            n_train: p.n_train,
            n_test: p.n_test,
            image_size: p.image_size,
        })
    }

    pub fn sweep(&self) -> anyhow::Result<(Vec<(dina_core::rvq::Strategy, usize)>, SweepConfig)> {
        use dina_core::rvq::Strategy;
        let s = &self.sweep;
        let configs = s
            .configs
            .iter()
            .map(|c| {
                let lower = c.to_ascii_lowercase();
                let (name, l) = lower.split_once('-').with_context(|| format!("sweep config {c:?} is not NAME-LEVELS"))?;
                let l: usize = l.parse().with_context(|| format!("sweep config {c:?} has a bad level count"))?;
                let strat = match name {
                    "vq" => Strategy::Vq,
                    "rvq" => Strategy::Rvq,
                    _ => bail!("sweep config {c:?}: unknown strategy {name:?}"),
                };
                Ok((strat, l))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let cfg = SweepConfig {
            codebook_size: s.codebook_size,
            steps: s.steps,
            batch_size: s.batch_size,
            eval_every: s.eval_every,
            seed: self.seed,
            ..SweepConfig::default()
        };
        Ok((configs, cfg))
    }
}
