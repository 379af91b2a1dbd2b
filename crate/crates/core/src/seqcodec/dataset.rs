use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{layout_sample, pack, sample_delay, GuideMode, LaidOutSample, PackedSequence, Segment, Vocab, DEFAULT_MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::math;
use crate::rvq::TokenGrid;

/// Audio pre-training sample formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SampleKind {
    /// prompt, masked audio, supervised transcript
    Asr = 0,
    /// consecutive text-guided audio segments
    Tts = 1,
    /// masked audio alternating with text
    Intlv = 2,
    /// masked audio alternating with text-guided audio
    IntlvTa = 3,
    /// supervised audio only
    PureAudio = 4,
    /// prompt, masked audio, response
    Others = 5,
}

impl SampleKind {
    pub const ALL: [SampleKind; 6] = [Self::Asr, Self::Tts, Self::Intlv, Self::IntlvTa, Self::PureAudio, Self::Others];

    pub fn name(self) -> &'static str {
        match self {
            Self::Asr => "ASR",
            Self::Tts => "TTS",
            Self::Intlv => "INTLV",
            Self::IntlvTa => "INTLV-TA",
            Self::PureAudio => "PURE-AUDIO",
            Self::Others => "OTHERS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm: String = s.chars().map(|c| if c == '_' { '-' } else { c.to_ascii_uppercase() }).collect();
        let norm = if norm == "PURE" { "PURE-AUDIO".into() } else { norm };
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(alloc::format!("unknown sample kind {s:?}")))
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == v)
    }

    /// Whether pure (unguided) audio carries loss in this kind.
    pub fn supervises_pure_audio(self) -> bool {
        self == Self::PureAudio
    }
}

/// Sampling weights over [`SampleKind`], in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    entries: Vec<(SampleKind, f64)>,
}

impl Default for Mix {
    fn default() -> Self {
        use SampleKind::*;
        Self { entries: alloc::vec![(Asr, 11.0), (Tts, 40.0), (Intlv, 22.0), (IntlvTa, 22.0), (PureAudio, 2.0), (Others, 3.0)] }
    }
}

impl Mix {
    pub fn new(entries: Vec<(SampleKind, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("empty mix".into()));
        }
        for (i, (k, w)) in entries.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Config(alloc::format!("weight for {} must be non-negative", k.name())));
            }
            if entries[..i].iter().any(|(o, _)| o == k) {
                return Err(Error::Config(alloc::format!("{} listed twice", k.name())));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if math::abs(total - 100.0) > 1.0 {
            return Err(Error::Config(alloc::format!("proportions sum to {total}, expected 100")));
        }
        Ok(Self { entries })
    }

    pub fn from_names<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let entries = pairs.into_iter().map(|(n, w)| Ok((SampleKind::parse(n)?, w))).collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(SampleKind, f64)] {
        &self.entries
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SampleKind {
        let w: Vec<f64> = self.entries.iter().map(|e| e.1).collect();
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
        self.entries[math::categorical(rng, &probs)].0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub vocab: Vocab,
    pub n_samples: usize,
    /// Inclusive range of text segment lengths.
    pub text_len: (usize, usize),
    /// Inclusive range of audio frame counts.
    pub audio_len: (usize, usize),
    /// Inclusive range of segment counts for multi-segment kinds.
    pub segments: (usize, usize),
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            vocab: Vocab { text: 64, levels: alloc::vec![16, 8, 8, 8] },
            n_samples: 10_000,
            text_len: (2, 8),
            audio_len: (3, 12),
            segments: (2, 4),
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        let ok = |(a, b): (usize, usize)| a >= 1 && a <= b;
        if !ok(self.text_len) || !ok(self.audio_len) || !ok(self.segments) || self.n_samples == 0 {
            return Err(Error::Config("dataset ranges must be non-empty with minimum at least 1".into()));
        }
        Vocab::new(self.vocab.text, self.vocab.levels.clone()).map(|_| ())
    }
}

fn random_text<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Vec<u32> {
    let n = rng.gen_range(cfg.text_len.0..=cfg.text_len.1);
    (0..n).map(|_| rng.gen_range(0..cfg.vocab.plain()) as u32).collect()
}

fn random_audio<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> TokenGrid {
    let n = rng.gen_range(cfg.audio_len.0..=cfg.audio_len.1);
    let l = cfg.vocab.n_levels();
    let tokens = (0..n * l).map(|i| rng.gen_range(0..cfg.vocab.levels[i % l]) as u32).collect();
    TokenGrid::flat(tokens, l).expect("shape is consistent")
}

fn text_guided<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Segment {
    let text = random_text(cfg, rng);
    let delay = sample_delay(text.len(), rng).expect("text is non-empty");
    Segment::text_guided(text, random_audio(cfg, rng), delay, GuideMode::Parallel, true)
}

/// Synthetic segments in the format of `kind`.
pub fn generate_sample<R: Rng + ?Sized>(kind: SampleKind, cfg: &DatasetConfig, rng: &mut R) -> Vec<Segment> {
    let pure_sup = kind.supervises_pure_audio();
    let count = rng.gen_range(cfg.segments.0..=cfg.segments.1);
    match kind {
        SampleKind::Asr | SampleKind::Others => alloc::vec![
            Segment::text(random_text(cfg, rng), false),
            Segment::pure_audio(random_audio(cfg, rng), pure_sup),
            Segment::text(random_text(cfg, rng), true),
        ],
        SampleKind::Tts => (0..count).map(|_| text_guided(cfg, rng)).collect(),
        SampleKind::Intlv => (0..count)
            .map(|i| {
                if i % 2 == 0 {
                    Segment::pure_audio(random_audio(cfg, rng), pure_sup)
                } else {
                    Segment::text(random_text(cfg, rng), true)
                }
            })
            .collect(),
        SampleKind::IntlvTa => (0..count)
            .map(|i| if i % 2 == 0 { Segment::pure_audio(random_audio(cfg, rng), pure_sup) } else { text_guided(cfg, rng) })
            .collect(),
        SampleKind::PureAudio => alloc::vec![Segment::pure_audio(random_audio(cfg, rng), true)],
    }
}

/// Draws `n_samples` synthetic samples from `mix` and packs them.
///
/// Sample `i` uses its own RNG stream, so the output does not depend on how
/// samples are scheduled.
pub fn build_dataset(mix: &Mix, cfg: &DatasetConfig) -> Result<Vec<PackedSequence>> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = math::rng_for(cfg.seed, i as u64);
        let kind = mix.draw(&mut rng);
        let segments = generate_sample(kind, cfg, &mut rng);
        let steps = layout_sample(&segments, &cfg.vocab)?;
        samples.push(LaidOutSample { id: i as u32, kind: Some(kind), steps });
    }
    pack(samples, cfg.max_seq_len)
}
