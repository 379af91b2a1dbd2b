//! Toy decoder-only backbone with a text head and a depth head.
//!
//! Every modality goes through the same blocks. A step's input embedding is
//! the sum of its text-channel token, its AS/AE marker, its frame (per-level
//! tables summed, then re-encoded by the modality's Pre-Buffer) and the pad
//! vector where the step carries only one stream.

mod generate;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::depth_head::{depth_loss_graph, DepthConfig, DepthHead, TaskTag};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Block, Linear, RmsNorm};
use crate::params::{ParamId, ParamStore};
use crate::seqcodec::{EmbeddingTables, Modality, PackedSequence, PreBuffer, Targets, Vocab, DEFAULT_MAX_SEQ_LEN};
use crate::tensor::Tensor;

pub use generate::{GenMode, GenerateOptions, Generation};
pub use train::{memorization_batch, tensor_to_words, words_to_tensor, StepReport, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub text_vocab: usize,
    pub levels: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub prebuffer_hidden: usize,
    pub depth_width: usize,
    pub depth_layers: usize,
    pub depth_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            text_vocab: 64,
            levels: alloc::vec![16, 8, 8, 8],
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 256,
            prebuffer_hidden: 128,
            depth_width: 64,
            depth_layers: 2,
            depth_heads: 4,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

impl ToyConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab { text: self.text_vocab, levels: self.levels.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.text_vocab, self.levels.clone())?;
        let dims = [self.hidden, self.layers, self.heads, self.ffn_hidden, self.prebuffer_hidden, self.depth_width, self.depth_heads];
        if dims.contains(&0) || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 || (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(format!("hidden {} must split into {} even-width heads", self.hidden, self.heads)));
        }
        if self.depth_width % self.depth_heads != 0 {
            return Err(Error::Config(format!("depth width {} not divisible by {} heads", self.depth_width, self.depth_heads)));
        }
        Ok(())
    }

    /// Integer encoding used by checkpoints.
    pub fn to_words(&self) -> Vec<u64> {
        let mut w = alloc::vec![
            self.text_vocab,
            self.hidden,
            self.layers,
            self.heads,
            self.ffn_hidden,
            self.prebuffer_hidden,
            self.depth_width,
            self.depth_layers,
            self.depth_heads,
            self.max_seq_len,
            self.levels.len(),
        ];
        w.extend(&self.levels);
        w.into_iter().map(|x| x as u64).collect()
    }

    pub fn from_words(w: &[u64]) -> Result<Self> {
        let bad = || Error::Decode("malformed model config record".into());
        if w.len() < 11 || w.len() != 11 + w[10] as usize {
            return Err(bad());
        }
        let u = |i: usize| w[i] as usize;
        let cfg = Self {
            text_vocab: u(0),
            hidden: u(1),
            layers: u(2),
            heads: u(3),
            ffn_hidden: u(4),
            prebuffer_hidden: u(5),
            depth_width: u(6),
            depth_layers: u(7),
            depth_heads: u(8),
            max_seq_len: u(9),
            levels: w[11..].iter().map(|&x| x as usize).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Frame modalities with their own tables and Pre-Buffer.
pub const FRAME_MODALITIES: [Modality; 2] = [Modality::Audio, Modality::Vision];

#[derive(Debug, Clone, PartialEq)]
pub struct FramePath {
    pub tables: Vec<ParamId>,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ToyConfig,
    pub text_emb: ParamId,
    pub frames: Vec<FramePath>,
    pub pad: ParamId,
    pub blocks: Vec<Block>,
    pub norm: RmsNorm,
    pub text_head: Linear,
    pub depth: DepthHead,
}

/// Output of a forward pass on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub text_logits: Var,
    pub hidden: Var,
}

/// Scalar summary of a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub text: f64,
    pub depth: f64,
    pub text_count: usize,
    pub depth_count: usize,
}

fn task_tag(m: Modality) -> TaskTag {
    match m {
        Modality::Audio => TaskTag::Audio,
        _ => TaskTag::Generation,
    }
}

impl ToyModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &ToyConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = math::rng(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let std = 1.0 / math::sqrt(h as f64);
        let text_emb = store.add("embed.text", Tensor::randn(cfg.text_vocab, h, std, &mut rng));
        let frames = FRAME_MODALITIES
            .iter()
            .map(|m| {
                let name = modality_name(*m);
                let tables = cfg
                    .levels
                    .iter()
                    .enumerate()
                    .map(|(l, &k)| store.add(&format!("embed.{name}.level.{l}"), Tensor::randn(k, h, std, &mut rng)))
                    .collect();
                let up = Linear::xavier(&mut store, &format!("prebuffer.{name}.up"), h, cfg.prebuffer_hidden, true, &mut rng);
                let down = Linear::xavier(&mut store, &format!("prebuffer.{name}.down"), cfg.prebuffer_hidden, h, true, &mut rng);
                FramePath { tables, up, down }
            })
            .collect();
        let pad = store.add("embed.pad", Tensor::randn(1, h, std, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("block.{i}"), h, cfg.heads, cfg.ffn_hidden, cfg.layers, &mut rng))
            .collect();
        let norm = RmsNorm::new(&mut store, "final_norm", h);
        let text_head = Linear::xavier(&mut store, "head.text", h, cfg.text_vocab, false, &mut rng);
        let dcfg = DepthConfig {
            hidden: h,
            width: cfg.depth_width,
            layers: cfg.depth_layers,
            heads: cfg.depth_heads,
            levels: cfg.levels.clone(),
        };
        let depth = DepthHead::new(&mut store, "depth", &dcfg, &mut rng)?;
        Ok((Self { cfg: cfg.clone(), text_emb, frames, pad, blocks, norm, text_head, depth }, store))
    }

    fn frame_path(&self, m: Modality) -> &FramePath {
        &self.frames[FRAME_MODALITIES.iter().position(|x| *x == m).expect("frame modality")]
    }

    /// The frame embedding of modality `m` as plain tables.
    pub fn embedding_tables(&self, store: &ParamStore, m: Modality) -> (EmbeddingTables, PreBuffer) {
        let p = self.frame_path(m);
        let tables = EmbeddingTables {
            levels: p.tables.iter().map(|&id| store.get(id).clone()).collect(),
            text: store.get(self.text_emb).clone(),
        };
        let pb = PreBuffer::Ffn {
            w1: store.get(p.up.weight).clone(),
            b1: store.get(p.up.bias.expect("bias")).clone(),
            w2: store.get(p.down.weight).clone(),
            b2: store.get(p.down.bias.expect("bias")).clone(),
        };
        (tables, pb)
    }

    fn check(&self, seq: &PackedSequence) -> Result<()> {
        if seq.len() > self.cfg.max_seq_len {
            return Err(Error::ContextOverflow { needed: seq.len(), limit: self.cfg.max_seq_len });
        }
        seq.validate(self.cfg.max_seq_len)?;
        let l = self.cfg.levels.len();
        for s in &seq.steps {
            for t in s.text.iter().chain(&s.marker) {
                if *t as usize >= self.cfg.text_vocab {
                    return Err(Error::Decode(format!("text id {t} out of range {}", self.cfg.text_vocab)));
                }
            }
            if let Some(f) = &s.frame {
                if f.len() != l || s.modality == Modality::Text {
                    return Err(Error::Config(format!("frame with {} levels on a {:?} step", f.len(), s.modality)));
                }
                for (lv, &t) in f.iter().enumerate() {
                    if t as usize >= self.cfg.levels[lv] {
                        return Err(Error::Decode(format!("level {lv} token {t} out of range")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, seq: &PackedSequence) -> Var {
        let steps = &seq.steps;
        let text = g.param(store, self.text_emb);
        let mut x = g.gather_rows(text, steps.iter().map(|s| s.text.map(|t| t as usize)).collect());
        if steps.iter().any(|s| s.marker.is_some()) {
            let m = g.gather_rows(text, steps.iter().map(|s| s.marker.map(|t| t as usize)).collect());
            x = g.add(x, m);
        }
        for &m in &FRAME_MODALITIES {
            let rows: Vec<usize> = (0..steps.len()).filter(|&i| steps[i].frame.is_some() && steps[i].modality == m).collect();
            if rows.is_empty() {
                continue;
            }
            let path = self.frame_path(m);
            let mut sum: Option<Var> = None;
            for (l, &table) in path.tables.iter().enumerate() {
                let t = g.param(store, table);
                let idx = rows.iter().map(|&i| Some(steps[i].frame.as_ref().expect("frame")[l] as usize)).collect();
                let e = g.gather_rows(t, idx);
                sum = Some(match sum {
                    Some(acc) => g.add(acc, e),
                    None => e,
                });
            }
            let hdn = path.up.forward(g, store, sum.expect("at least one level"));
            let hdn = g.gelu(hdn);
            let pre = path.down.forward(g, store, hdn);
            let mut slot = alloc::vec![None; steps.len()];
            for (j, &i) in rows.iter().enumerate() {
                slot[i] = Some(j);
            }
            let scattered = g.gather_rows(pre, slot);
            x = g.add(x, scattered);
        }
        if steps.iter().any(|s| s.pad) {
            let pad = g.param(store, self.pad);
            let p = g.gather_rows(pad, steps.iter().map(|s| s.pad.then_some(0)).collect());
            x = g.add(x, p);
        }
        x
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, seq: &PackedSequence) -> Result<Forward> {
        self.check(seq)?;
        let segments = seq.segments();
        let positions = seq.positions();
        let mut x = self.embed(g, store, seq);
        for b in &self.blocks {
            x = b.forward(g, store, x, &segments, Some(&positions));
        }
        let hidden = self.norm.forward(g, store, x);
        let text_logits = self.text_head.forward(g, store, hidden);
        Ok(Forward { text_logits, hidden })
    }

    /// Text logits and teacher-forced depth logits for every position that
    /// has a frame target. Returns `(text, depth, rows)`.
    pub fn forward(&self, store: &ParamStore, seq: &PackedSequence) -> Result<(Tensor, Vec<Tensor>, Vec<usize>)> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, store, seq)?;
        let targets = seq.targets(&self.cfg.vocab());
        let (depth, rows) = self.depth_logits(&mut g, store, seq, &targets, f.hidden)?;
        Ok((g.value(f.text_logits).clone(), depth.iter().map(|&v| g.value(v).clone()).collect(), rows))
    }

    fn depth_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &PackedSequence,
        targets: &[Targets],
        hidden: Var,
    ) -> Result<(Vec<Var>, Vec<usize>)> {
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].frame.is_some()).collect();
        if rows.is_empty() {
            return Ok((Vec::new(), rows));
        }
        let sel = g.gather_rows(hidden, rows.iter().map(|&i| Some(i)).collect());
        let teacher: Vec<&[u32]> = rows.iter().map(|&i| targets[i].frame.as_deref().expect("frame")).collect();
        let tags: Vec<TaskTag> = rows.iter().map(|&i| task_tag(seq.steps[i + 1].modality)).collect();
        let logits = self.depth.forward_graph(g, store, sel, &teacher, &tags)?;
        Ok((logits, rows))
    }

    /// Masked text CE mean plus masked depth CE mean on the tape.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, seq: &PackedSequence) -> Result<(Var, LossReport)> {
        let f = self.forward_graph(g, store, seq)?;
        let targets = seq.targets(&self.cfg.vocab());
        let (depth, rows) = self.depth_logits(g, store, seq, &targets, f.hidden)?;
        Ok(head_loss(g, f.text_logits, &depth, &rows, &targets))
    }

    pub fn loss(&self, store: &ParamStore, seq: &PackedSequence) -> Result<LossReport> {
        let mut g = Graph::new();
        Ok(self.loss_graph(&mut g, store, seq)?.1)
    }
}

/// Joint loss from head outputs. Targets whose loss flag is off are dropped,
/// so their logits receive exactly zero gradient.
pub fn head_loss(g: &mut Graph, text_logits: Var, depth_logits: &[Var], depth_rows: &[usize], targets: &[Targets]) -> (Var, LossReport) {
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let text_t: Vec<Option<usize>> = targets.iter().map(|t| t.text.filter(|_| t.text_loss).map(|x| x as usize)).collect();
    report.text_count = text_t.iter().flatten().count();
    if report.text_count > 0 {
        let ce = g.cross_entropy_sum(text_logits, text_t);
        let mean = g.scale(ce, 1.0 / report.text_count as f64);
        report.text = g.value(mean).item();
        total = Some(mean);
    }
    if !depth_logits.is_empty() {
        let dt: Vec<Option<&[u32]>> =
            depth_rows.iter().map(|&i| targets[i].frame.as_deref().filter(|_| targets[i].depth_loss)).collect();
        let (sum, count) = depth_loss_graph(g, depth_logits, &dt);
        if count > 0 {
            report.depth_count = count;
            let mean = g.scale(sum.expect("levels"), 1.0 / count as f64);
            report.depth = g.value(mean).item();
            total = Some(match total {
                Some(t) => g.add(t, mean),
                None => mean,
            });
        }
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    report.total = g.value(total).item();
    (total, report)
}

pub fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Audio => "audio",
        Modality::Vision => "vision",
    }
}

/// Names of all parameters, in store order.
pub fn param_names(store: &ParamStore) -> Vec<String> {
    store.iter().map(|(_, n, _)| String::from(n)).collect()
}
