use alloc::vec;
use alloc::vec::Vec;

use super::ToyModel;
use crate::autograd::Graph;
use crate::depth_head::{sample_token, TaskTag};
use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamStore;
use crate::rvq::TokenGrid;
use crate::seqcodec::{layout_sample, GuideMode, LaidOutSample, Modality, PackedSequence, Segment, SegmentKind, Step};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Text,
    ImageTokens,
    AudioParallel,
    AudioSerial,
}

impl GenMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "image_tokens" | "image-tokens" => Ok(Self::ImageTokens),
            "audio_parallel" | "audio-parallel" => Ok(Self::AudioParallel),
            "audio_serial" | "audio-serial" => Ok(Self::AudioSerial),
            _ => Err(Error::Config(alloc::format!("unknown generation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    /// Cap on generated steps (also bounded by the context length).
    pub max_steps: usize,
    /// `None` decodes greedily.
    pub temperature: Option<f64>,
    /// Parallel audio: AS lands on step `delay + 1` of the generated segment.
    pub delay: usize,
    pub image_shape: Vec<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { max_steps: 64, temperature: None, delay: 1, image_shape: vec![4, 4] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub segments: Vec<Segment>,
    /// Generated steps only, prompt excluded.
    pub steps: Vec<Step>,
    pub truncated: bool,
}

struct Decoder<'a> {
    model: &'a ToyModel,
    store: &'a ParamStore,
    steps: Vec<Step>,
    rng: math::SeededRng,
    temperature: Option<f64>,
}

impl Decoder<'_> {
    /// Text logits and final hidden state at the last step.
    fn peek(&self) -> Result<(Vec<f64>, Tensor)> {
        let seq = PackedSequence::single(LaidOutSample { id: 0, kind: None, steps: self.steps.clone() });
        let mut g = Graph::new();
        let f = self.model.forward_graph(&mut g, self.store, &seq)?;
        let last = seq.len() - 1;
        let logits = g.value(f.text_logits).row(last).to_vec();
        let hidden = Tensor::from_vec(1, self.model.cfg.hidden, g.value(f.hidden).row(last).to_vec());
        Ok((logits, hidden))
    }

    fn pick(&mut self, logits: &[f64], allowed: impl Fn(u32) -> bool) -> u32 {
        let masked: Vec<f64> =
            logits.iter().enumerate().map(|(i, &x)| if allowed(i as u32) { x } else { f64::NEG_INFINITY }).collect();
        sample_token(&masked, self.temperature, &mut self.rng) as u32
    }

    fn frame(&mut self, hidden: &Tensor, tag: TaskTag) -> Result<Vec<u32>> {
        let grid = self.model.depth.depth_sample(self.store, hidden, &[tag], self.temperature, &mut self.rng)?;
        Ok(grid.position(0).to_vec())
    }
}

fn step(span: SegmentKind) -> Step {
    Step {
        text: None,
        marker: None,
        frame: None,
        pad: false,
        modality: Modality::Text,
        span,
        segment: 0,
        text_sup: true,
        frame_sup: true,
    }
}

impl ToyModel {
    /// Continues `prompt` autoregressively in the layout of `mode`.
    pub fn generate(
        &self,
        store: &ParamStore,
        prompt: &[Segment],
        mode: GenMode,
        opts: &GenerateOptions,
        seed: u64,
    ) -> Result<Generation> {
        let vocab = self.cfg.vocab();
        let prompt_steps = layout_sample(prompt, &vocab)?;
        if prompt_steps.is_empty() {
            return Err(Error::Input("generation needs a non-empty prompt".into()));
        }
        let limit = self.cfg.max_seq_len;
        if prompt_steps.len() > limit {
            return Err(Error::ContextOverflow { needed: prompt_steps.len(), limit });
        }
        let cap = opts.max_steps.min(limit - prompt_steps.len());
        let start = prompt_steps.len();
        let mut d = Decoder {
            model: self,
            store,
            steps: prompt_steps,
            rng: math::rng(seed),
            temperature: opts.temperature,
        };
        let plain = vocab.plain() as u32;
        let (te, as_, ae) = (vocab.text_end(), vocab.audio_start(), vocab.audio_end());
        let text_or_end = move |t: u32| t < plain || t == te;
        let mut done = false;
        let mut segments = Vec::new();
        match mode {
            GenMode::Text => {
                let mut text = Vec::new();
                while d.steps.len() - start < cap {
                    let (logits, _) = d.peek()?;
                    let t = d.pick(&logits, text_or_end);
                    if t == te {
                        done = true;
                        break;
                    }
                    text.push(t);
                    d.steps.push(Step { text: Some(t), ..step(SegmentKind::Text) });
                }
                segments.push(Segment::text(text, true));
            }
            GenMode::ImageTokens => {
                let n: usize = opts.image_shape.iter().product();
                let mut tokens = Vec::new();
                while d.steps.len() - start < cap.min(n) {
                    let (_, hidden) = d.peek()?;
                    let f = d.frame(&hidden, TaskTag::Generation)?;
                    tokens.extend_from_slice(&f);
                    d.steps.push(Step { frame: Some(f), modality: Modality::Vision, ..step(SegmentKind::Vision) });
                }
                let count = d.steps.len() - start;
                done = count == n;
                let shape = if done { opts.image_shape.clone() } else { vec![count] };
                segments.push(Segment::vision(TokenGrid::new(tokens, vocab.n_levels(), shape)?, true));
            }
            GenMode::AudioSerial => {
                let kind = SegmentKind::TextGuidedAudio;
                let (mut text, mut audio) = (Vec::new(), Vec::new());
                let mut in_audio = false;
                while d.steps.len() - start < cap {
                    if !in_audio {
                        let (logits, _) = d.peek()?;
                        let t = d.pick(&logits, text_or_end);
                        d.steps.push(Step { text: Some(t), ..step(kind) });
                        if t == te {
                            in_audio = true;
                            if d.steps.len() - start < cap {
                                d.steps.push(Step { marker: Some(as_), modality: Modality::Audio, ..step(kind) });
                            }
                        } else {
                            text.push(t);
                        }
                        continue;
                    }
                    let (logits, hidden) = d.peek()?;
                    if d.pick(&logits, |t| t == te || t == ae) == ae {
                        d.steps.push(Step { marker: Some(ae), modality: Modality::Audio, ..step(kind) });
                        done = true;
                        break;
                    }
                    let f = d.frame(&hidden, TaskTag::Audio)?;
                    audio.extend_from_slice(&f);
                    d.steps.push(Step { frame: Some(f), modality: Modality::Audio, ..step(kind) });
                }
                if !text.is_empty() {
                    let grid = TokenGrid::flat(audio, vocab.n_levels())?;
                    segments.push(Segment::text_guided(text, grid, 0, GuideMode::Serial, true));
                }
            }
            GenMode::AudioParallel => {
                let kind = SegmentKind::TextGuidedAudio;
                let delay = opts.delay.max(1);
                let (mut text, mut audio) = (Vec::new(), Vec::new());
                let (mut text_open, mut audio_started, mut audio_open) = (true, false, false);
                let mut as_step = 0;
                while d.steps.len() - start < cap {
                    let s = d.steps.len() - start + 1;
                    let (logits, hidden) = d.peek()?;
                    let mut st = step(kind);
                    let text_was_open = text_open;
                    if text_open {
                        let t = d.pick(&logits, text_or_end);
                        st.text = Some(t);
                        if t == te {
                            text_open = false;
                        } else {
                            text.push(t);
                        }
                    }
                    if !audio_started {
                        if s == delay + 1 || !text_open {
                            st.marker = Some(as_);
                            audio_started = true;
                            audio_open = true;
                            as_step = s;
                        }
                    } else if audio_open {
                        if !text_was_open && d.pick(&logits, |t| t == te || t == ae) == ae {
                            st.marker = Some(ae);
                            audio_open = false;
                        } else {
                            let f = d.frame(&hidden, TaskTag::Audio)?;
                            audio.extend_from_slice(&f);
                            st.frame = Some(f);
                        }
                    }
                    let audio_on = st.marker.is_some() || st.frame.is_some();
                    st.pad = st.text.is_some() != audio_on;
                    if audio_on {
                        st.modality = Modality::Audio;
                    }
                    d.steps.push(st);
                    if !text_open && audio_started && !audio_open {
                        done = true;
                        break;
                    }
                }
                if !text.is_empty() {
                    let grid = TokenGrid::flat(audio, vocab.n_levels())?;
                    let delay = if audio_started { as_step - 1 } else { delay };
                    segments.push(Segment::text_guided(text, grid, delay, GuideMode::Parallel, true));
                }
            }
        }
        let steps = d.steps.split_off(start);
        Ok(Generation { segments, steps, truncated: !done })
    }
}
