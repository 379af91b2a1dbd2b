//! Multimodal sequence layout.
//!
//! A sample is a list of [`Segment`]s. Laying it out yields one [`Step`] per
//! backbone position. A step carries up to three inputs that are summed into
//! a single embedding: a text-channel token, an audio-channel marker (AS/AE)
//! and a multi-level frame. Text-guided audio in parallel mode shares steps
//! between the text and audio streams; everything else uses one item per
//! step.
//!
//! Loss supervision is stored per token (`text_sup`, `frame_sup`) and turned
//! into next-step targets by [`targets`].

mod dataset;
mod embed;
mod pack;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{input_err, Error, Result};
use crate::rvq::TokenGrid;

pub use dataset::{build_dataset, generate_sample, DatasetConfig, Mix, SampleKind};
pub use embed::{embed_multilevel, EmbeddingTables, PreBuffer};
pub use pack::{ffd_bins, pack, LaidOutSample, PackedSample, PackedSequence, DEFAULT_MAX_SEQ_LEN};

/// Text vocabulary and multi-level codebook sizes shared by every modality.
///
/// The three highest text ids are reserved for AS, AE and TE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub text: usize,
    pub levels: Vec<usize>,
}

impl Vocab {
    pub fn new(text: usize, levels: Vec<usize>) -> Result<Self> {
        if text < 4 {
            return Err(Error::Config(alloc::format!("text vocabulary {text} leaves no room for specials")));
        }
        if levels.is_empty() || levels.iter().any(|&k| k == 0) {
            return Err(Error::Config("level sizes must be positive and non-empty".into()));
        }
        Ok(Self { text, levels })
    }

    pub fn audio_start(&self) -> u32 {
        (self.text - 3) as u32
    }

    pub fn audio_end(&self) -> u32 {
        (self.text - 2) as u32
    }

    pub fn text_end(&self) -> u32 {
        (self.text - 1) as u32
    }

    /// Number of ordinary (non-special) text ids.
    pub fn plain(&self) -> usize {
        self.text - 3
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.audio_start() && (id as usize) < self.text
    }

    fn check_text(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.plain()) {
            Some(t) => Err(Error::Decode(alloc::format!("text token {t} outside plain vocabulary {}", self.plain()))),
            None => Ok(()),
        }
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.n_levels() != self.n_levels() {
            return Err(Error::Config(alloc::format!(
                "grid has {} levels, vocabulary has {}",
                grid.n_levels(),
                self.n_levels()
            )));
        }
        grid.validate(&self.levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text = 0,
    Audio = 1,
    Vision = 2,
}

impl Modality {
    pub fn from_u8(v: u8) -> Option<Self> {
        [Self::Text, Self::Audio, Self::Vision].into_iter().find(|m| *m as u8 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentKind {
    Text = 0,
    PureAudio = 1,
    TextGuidedAudio = 2,
    Vision = 3,
}

impl SegmentKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        [Self::Text, Self::PureAudio, Self::TextGuidedAudio, Self::Vision].into_iter().find(|m| *m as u8 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideMode {
    Parallel,
    Serial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: Vec<u32>,
    pub grid: Option<TokenGrid>,
    /// Parallel text-guided audio only.
    pub delay: usize,
    pub mode: GuideMode,
    pub supervised: bool,
}

impl Segment {
    pub fn text(tokens: Vec<u32>, supervised: bool) -> Self {
        Self { kind: SegmentKind::Text, text: tokens, grid: None, delay: 0, mode: GuideMode::Serial, supervised }
    }

    pub fn pure_audio(grid: TokenGrid, supervised: bool) -> Self {
        Self { kind: SegmentKind::PureAudio, text: Vec::new(), grid: Some(grid), delay: 0, mode: GuideMode::Serial, supervised }
    }

    pub fn text_guided(text: Vec<u32>, grid: TokenGrid, delay: usize, mode: GuideMode, supervised: bool) -> Self {
        Self { kind: SegmentKind::TextGuidedAudio, text, grid: Some(grid), delay, mode, supervised }
    }

    pub fn vision(grid: TokenGrid, supervised: bool) -> Self {
        Self { kind: SegmentKind::Vision, text: Vec::new(), grid: Some(grid), delay: 0, mode: GuideMode::Serial, supervised }
    }
}

/// One backbone position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub text: Option<u32>,
    pub marker: Option<u32>,
    pub frame: Option<Vec<u32>>,
    /// Only one of the two streams is present inside a parallel span.
    pub pad: bool,
    pub modality: Modality,
    pub span: SegmentKind,
    pub segment: u32,
    pub text_sup: bool,
    /// Covers frames and AS/AE markers.
    pub frame_sup: bool,
}

impl Step {
    fn empty(span: SegmentKind, segment: u32, sup: bool) -> Self {
        Self {
            text: None,
            marker: None,
            frame: None,
            pad: false,
            modality: Modality::Text,
            span,
            segment,
            text_sup: sup,
            frame_sup: sup,
        }
    }
}

/// Flattened view of a layout in emission order (text, marker, frame per step).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Text(u32),
    Marker(u32),
    Frame(Vec<u32>),
}

pub fn flatten(steps: &[Step]) -> Vec<Token> {
    let mut out = Vec::new();
    for s in steps {
        if let Some(t) = s.text {
            out.push(Token::Text(t));
        }
        if let Some(m) = s.marker {
            out.push(Token::Marker(m));
        }
        if let Some(f) = &s.frame {
            out.push(Token::Frame(f.clone()));
        }
    }
    out
}

/// Uniform draw from `1..=text_len`.
pub fn sample_delay<R: Rng + ?Sized>(text_len: usize, rng: &mut R) -> Result<usize> {
    if text_len < 1 {
        return Err(input_err!("text length must be at least 1"));
    }
    Ok(rng.gen_range(1..=text_len))
}

/// Layout of one text-guided audio segment.
///
/// Parallel mode puts text (then TE) on steps `1..=T+1`, AS on step `delay+1`,
/// frames after it and AE last. Serial mode is text, TE, AS, frames, AE with
/// one item per step and ignores `delay`.
pub fn build_text_guided_segment(
    text: &[u32],
    audio: &TokenGrid,
    delay: usize,
    mode: GuideMode,
    vocab: &Vocab,
) -> Result<Vec<Step>> {
    layout_text_guided(text, audio, delay, mode, vocab, 0, true)
}

fn layout_text_guided(
    text: &[u32],
    audio: &TokenGrid,
    delay: usize,
    mode: GuideMode,
    vocab: &Vocab,
    segment: u32,
    sup: bool,
) -> Result<Vec<Step>> {
    if text.is_empty() {
        return Err(input_err!("text-guided audio needs non-empty text"));
    }
    vocab.check_text(text)?;
    vocab.check_grid(audio)?;
    let kind = SegmentKind::TextGuidedAudio;
    let t = text.len();
    let n = audio.n_positions();
    match mode {
        GuideMode::Serial => {
            let mut steps = Vec::with_capacity(t + n + 3);
            for &tok in text {
                steps.push(Step { text: Some(tok), ..Step::empty(kind, segment, sup) });
            }
            steps.push(Step { text: Some(vocab.text_end()), ..Step::empty(kind, segment, sup) });
            steps.extend(audio_span(audio, vocab, kind, segment, sup));
            Ok(steps)
        }
        GuideMode::Parallel => {
            if delay < 1 || delay > t {
                return Err(Error::Layout(alloc::format!("delay {delay} outside 1..={t}")));
            }
            let total = (t + 1).max(delay + n + 2);
            let mut steps = Vec::with_capacity(total);
            for s in 1..=total {
                let mut step = Step::empty(kind, segment, sup);
                step.text = match s {
                    s if s <= t => Some(text[s - 1]),
                    s if s == t + 1 => Some(vocab.text_end()),
                    _ => None,
                };
                if s == delay + 1 {
                    step.marker = Some(vocab.audio_start());
                } else if s == delay + n + 2 {
                    step.marker = Some(vocab.audio_end());
                } else if s >= delay + 2 && s <= delay + n + 1 {
                    step.frame = Some(audio.position(s - delay - 2).to_vec());
                }
                let audio_on = step.marker.is_some() || step.frame.is_some();
                step.pad = step.text.is_some() != audio_on;
                if audio_on {
                    step.modality = Modality::Audio;
                }
                steps.push(step);
            }
            Ok(steps)
        }
    }
}

fn audio_span(grid: &TokenGrid, vocab: &Vocab, kind: SegmentKind, segment: u32, sup: bool) -> Vec<Step> {
    let audio = |s: Step| Step { modality: Modality::Audio, ..s };
    let mut steps = vec![audio(Step { marker: Some(vocab.audio_start()), ..Step::empty(kind, segment, sup) })];
    for p in 0..grid.n_positions() {
        steps.push(audio(Step { frame: Some(grid.position(p).to_vec()), ..Step::empty(kind, segment, sup) }));
    }
    steps.push(audio(Step { marker: Some(vocab.audio_end()), ..Step::empty(kind, segment, sup) }));
    steps
}

/// Lays out a whole sample, segment after segment.
pub fn layout_sample(segments: &[Segment], vocab: &Vocab) -> Result<Vec<Step>> {
    let mut steps = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        let id = i as u32;
        let sup = seg.supervised;
        let grid = || seg.grid.as_ref().ok_or_else(|| input_err!("segment {i} needs a token grid"));
        match seg.kind {
            SegmentKind::Text => {
                vocab.check_text(&seg.text)?;
                steps.extend(seg.text.iter().map(|&t| Step { text: Some(t), ..Step::empty(seg.kind, id, sup) }));
            }
            SegmentKind::PureAudio => {
                let g = grid()?;
                vocab.check_grid(g)?;
                steps.extend(audio_span(g, vocab, seg.kind, id, sup));
            }
            SegmentKind::TextGuidedAudio => {
                steps.extend(layout_text_guided(&seg.text, grid()?, seg.delay, seg.mode, vocab, id, sup)?);
            }
            SegmentKind::Vision => {
                let g = grid()?;
                vocab.check_grid(g)?;
                for p in 0..g.n_positions() {
                    steps.push(Step {
                        frame: Some(g.position(p).to_vec()),
                        modality: Modality::Vision,
                        ..Step::empty(seg.kind, id, sup)
                    });
                }
            }
        }
    }
    Ok(steps)
}

/// Next-step prediction targets for one position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Targets {
    pub text: Option<u32>,
    pub text_loss: bool,
    pub frame: Option<Vec<u32>>,
    pub depth_loss: bool,
}

/// Targets for the steps of a single sample.
///
/// The text head predicts the next text-channel token, else the next marker.
/// Inside an audio span, where the next step carries only a frame, the text
/// head is asked for TE: the text channel stays "ended" until AE, which is
/// how generation decides when to close the span.
pub fn targets(steps: &[Step], vocab: &Vocab) -> Vec<Targets> {
    let mut out = Vec::with_capacity(steps.len());
    for i in 0..steps.len() {
        let Some(next) = steps.get(i + 1) else {
            out.push(Targets::default());
            break;
        };
        let mut t = Targets::default();
        if let Some(x) = next.text {
            t.text = Some(x);
            t.text_loss = next.text_sup;
        } else if let Some(m) = next.marker {
            t.text = Some(m);
            t.text_loss = next.frame_sup;
        } else if next.frame.is_some() && next.modality == Modality::Audio {
            t.text = Some(vocab.text_end());
            t.text_loss = next.frame_sup;
        }
        if let Some(f) = &next.frame {
            t.frame = Some(f.clone());
            t.depth_loss = next.frame_sup;
        }
        out.push(t);
    }
    out
}
