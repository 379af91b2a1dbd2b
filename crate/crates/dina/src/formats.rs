//! Binary and text file formats. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use dina_core::grpo::Rollout;
use dina_core::rvq::{Codebook, CodebookLevel, Projection, RvqModel, TokenGrid};
use dina_core::seqcodec::{Modality, PackedSample, PackedSequence, SampleKind, SegmentKind, Step};
use dina_core::Tensor;

pub const RVQ_MAGIC: &[u8; 9] = b"DINA-RVQ1";
pub const FEATURES_MAGIC: &[u8; 9] = b"DINA-FEA1";
pub const TOKENS_MAGIC: &[u8; 9] = b"DINA-TOK1";
pub const SHARD_MAGIC: &[u8; 9] = b"DINA-SHD1";
pub const TOY_MAGIC: &[u8; 9] = b"DINA-TOY1";
pub const ROLLOUT_MAGIC: &[u8; 9] = b"DINA-RLG1";
const PROJ_TAG: &[u8; 4] = b"PROJ";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic: expected {expected}")]
    Magic { expected: String },
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] dina_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn invalid(msg: impl Into<String>) -> FormatError {
    FormatError::Invalid(msg.into())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io { path: dir.display().to_string(), source })?;
    }
    fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_magic(magic: &[u8]) -> Self {
        Self { buf: magic.to_vec() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn raw_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn record(&mut self, rec: &[u8]) {
        self.u32(rec.len());
        self.bytes(rec);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn with_magic(buf: &'a [u8], magic: &[u8]) -> Result<Self> {
        if !buf.starts_with(magic) {
            return Err(FormatError::Magic { expected: String::from_utf8_lossy(magic).into_owned() });
        }
        Ok(Self { buf, pos: magic.len() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn raw_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(self.raw_u32()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    // bounds the count against remaining bytes before allocating
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("tensor size overflows"))?;
        Ok(Tensor::from_vec(rows, cols, self.f32s(n)?))
    }

    fn record(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn finish(&self) -> Result<()> {
        if self.at_end() {
            Ok(())
        } else {
            Err(invalid(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

// ---- RVQ checkpoint ----

/// Header `L, d, K_l...`, then per level `e, N, m` as f32. An optional
/// `PROJ` trailer stores decay, smoothing eps, the projection and the
/// semantic decoder; without it the projection is the identity.
pub fn encode_rvq(model: &RvqModel) -> Vec<u8> {
    let cb = &model.codebook;
    let mut w = Writer::with_magic(RVQ_MAGIC);
    w.u32(cb.n_levels());
    w.u32(cb.dim());
    for k in cb.sizes() {
        w.u32(k);
    }
    for lvl in cb.levels() {
        w.f32s(&lvl.entries.data);
        w.f32s(&lvl.cluster_size);
        w.f32s(&lvl.embed_sum.data);
    }
    w.bytes(PROJ_TAG);
    w.u32(model.projection.d_in());
    w.f64(cb.decay());
    w.f64(cb.smoothing_eps());
    for p in [&model.projection, &model.semantic_decoder] {
        w.f32s(&p.weight.data);
        w.f32s(&p.bias.data);
    }
    w.buf
}

pub fn decode_rvq(bytes: &[u8]) -> Result<RvqModel> {
    let mut r = Reader::with_magic(bytes, RVQ_MAGIC)?;
    let n_levels = r.u32()?;
    let dim = r.u32()?;
    if n_levels == 0 || dim == 0 {
        return Err(invalid("checkpoint has no levels or zero dimension"));
    }
    let sizes = (0..n_levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut levels = Vec::with_capacity(n_levels);
    for &k in &sizes {
        let entries = r.tensor(k, dim)?;
        let cluster_size = r.f32s(k)?;
        let embed_sum = r.tensor(k, dim)?;
        levels.push(CodebookLevel { entries, cluster_size, embed_sum });
    }
    if r.at_end() {
        let codebook = Codebook::from_levels(levels, dina_core::rvq::DEFAULT_DECAY, dina_core::rvq::DEFAULT_SMOOTHING_EPS)?;
        return Ok(RvqModel {
            projection: Projection::identity(dim),
            codebook,
            semantic_decoder: Projection::identity(dim),
        });
    }
    if r.take(4)? != PROJ_TAG {
        return Err(invalid("unknown trailer after codebook levels"));
    }
    let d_in = r.u32()?;
    let decay = r.f64()?;
    let eps = r.f64()?;
    let projection = Projection::new(r.tensor(d_in, dim)?, r.tensor(1, dim)?)?;
    let semantic_decoder = Projection::new(r.tensor(dim, d_in)?, r.tensor(1, d_in)?)?;
    r.finish()?;
    Ok(RvqModel { projection, codebook: Codebook::from_levels(levels, decay, eps)?, semantic_decoder })
}

// ---- features ----

pub fn encode_features(x: &Tensor) -> Vec<u8> {
    let mut w = Writer::with_magic(FEATURES_MAGIC);
    w.u32(x.rows);
    w.u32(x.cols);
    w.f32s(&x.data);
    w.buf
}

/// Binary feature matrix, or text with one whitespace/comma separated row per line.
pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(FEATURES_MAGIC) {
        let mut r = Reader::with_magic(bytes, FEATURES_MAGIC)?;
        let (n, d) = (r.u32()?, r.u32()?);
        let t = r.tensor(n, d)?;
        r.finish()?;
        return Ok(t);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| invalid("features are neither binary nor UTF-8 text"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| invalid(format!("line {}: bad number {s:?}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(invalid(format!("line {}: {} values, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(invalid("no feature rows"));
    }
    Ok(Tensor::from_rows(&rows))
}

// ---- token grids ----

pub fn encode_tokens(grid: &TokenGrid) -> Vec<u8> {
    let mut w = Writer::with_magic(TOKENS_MAGIC);
    w.u32(grid.n_levels());
    w.u32(grid.shape().len());
    for &s in grid.shape() {
        w.u32(s);
    }
    for &t in grid.tokens() {
        w.raw_u32(t);
    }
    w.buf
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenGrid> {
    let mut r = Reader::with_magic(bytes, TOKENS_MAGIC)?;
    let levels = r.u32()?;
    let ndims = r.u32()?;
    let shape = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(levels, |a, &s| a.checked_mul(s)).ok_or_else(|| invalid("token grid size overflows"))?;
    let tokens = r.u32s(n)?;
    r.finish()?;
    Ok(TokenGrid::new(tokens, levels, shape)?)
}

// ---- dataset shards ----

const F_TEXT: u8 = 1;
const F_MARKER: u8 = 2;
const F_FRAME: u8 = 4;
const F_PAD: u8 = 8;
const F_TEXT_SUP: u8 = 16;
const F_FRAME_SUP: u8 = 32;

fn put_step(w: &mut Writer, s: &Step) {
    let mut flags = 0;
    for (on, bit) in [
        (s.text.is_some(), F_TEXT),
        (s.marker.is_some(), F_MARKER),
        (s.frame.is_some(), F_FRAME),
        (s.pad, F_PAD),
        (s.text_sup, F_TEXT_SUP),
        (s.frame_sup, F_FRAME_SUP),
    ] {
        if on {
            flags |= bit;
        }
    }
    w.u8(flags);
    w.u8(s.modality as u8);
    w.u8(s.span as u8);
    w.raw_u32(s.segment);
    if let Some(t) = s.text {
        w.raw_u32(t);
    }
    if let Some(m) = s.marker {
        w.raw_u32(m);
    }
    if let Some(f) = &s.frame {
        w.u32(f.len());
        for &t in f {
            w.raw_u32(t);
        }
    }
}

fn get_step(r: &mut Reader) -> Result<Step> {
    let flags = r.u8()?;
    if flags & !(F_TEXT | F_MARKER | F_FRAME | F_PAD | F_TEXT_SUP | F_FRAME_SUP) != 0 {
        return Err(invalid(format!("unknown step flags {flags:#x}")));
    }
    let modality = Modality::from_u8(r.u8()?).ok_or_else(|| invalid("unknown modality tag"))?;
    let span = SegmentKind::from_u8(r.u8()?).ok_or_else(|| invalid("unknown span tag"))?;
    let segment = r.raw_u32()?;
    let text = if flags & F_TEXT != 0 { Some(r.raw_u32()?) } else { None };
    let marker = if flags & F_MARKER != 0 { Some(r.raw_u32()?) } else { None };
    let frame = if flags & F_FRAME != 0 {
        let n = r.u32()?;
        Some(r.u32s(n)?)
    } else {
        None
    };
    Ok(Step {
        text,
        marker,
        frame,
        pad: flags & F_PAD != 0,
        modality,
        span,
        segment,
        text_sup: flags & F_TEXT_SUP != 0,
        frame_sup: flags & F_FRAME_SUP != 0,
    })
}

pub fn encode_sequence(seq: &PackedSequence) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(seq.samples.len());
    for s in &seq.samples {
        w.raw_u32(s.id);
        w.u8(s.kind.map_or(255, |k| k as u8));
        w.u32(s.start);
        w.u32(s.len);
    }
    w.u32(seq.steps.len());
    for s in &seq.steps {
        put_step(&mut w, s);
    }
    w.buf
}

pub fn decode_sequence(bytes: &[u8]) -> Result<PackedSequence> {
    let mut r = Reader::new(bytes);
    let n = r.u32()?;
    let mut samples = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let id = r.raw_u32()?;
        let kind = match r.u8()? {
            255 => None,
            v => Some(SampleKind::from_u8(v).ok_or_else(|| invalid(format!("unknown sample kind {v}")))?),
        };
        samples.push(PackedSample { id, kind, start: r.u32()?, len: r.u32()? });
    }
    let n = r.u32()?;
    let mut steps = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        steps.push(get_step(&mut r)?);
    }
    r.finish()?;
    let end = samples.iter().map(|s| s.start.saturating_add(s.len)).max().unwrap_or(0);
    if end > steps.len() {
        return Err(invalid(format!("sample spans reach step {end}, sequence has {}", steps.len())));
    }
    Ok(PackedSequence { steps, samples })
}

pub fn encode_shard(seqs: &[PackedSequence]) -> Vec<u8> {
    let mut w = Writer::with_magic(SHARD_MAGIC);
    w.u32(seqs.len());
    for s in seqs {
        w.record(&encode_sequence(s));
    }
    w.buf
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<PackedSequence>> {
    let mut r = Reader::with_magic(bytes, SHARD_MAGIC)?;
    let n = r.u32()?;
    let out = (0..n)
        .map(|i| decode_sequence(r.record()?).map_err(|e| invalid(format!("record {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

// ---- toy model checkpoint ----

pub fn encode_named(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut w = Writer::with_magic(TOY_MAGIC);
    w.u32(tensors.len());
    for (name, t) in tensors {
        w.u32(name.len());
        w.bytes(name.as_bytes());
        w.u32(t.rows);
        w.u32(t.cols);
        w.f32s(&t.data);
    }
    w.buf
}

pub fn decode_named(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::with_magic(bytes, TOY_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| invalid("tensor name is not UTF-8"))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        out.push((name, r.tensor(rows, cols)?));
    }
    r.finish()?;
    Ok(out)
}

// ---- rollout log ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Unscored = 0,
    Kept = 1,
    Dropped = 2,
}

impl Verdict {
    fn from_u8(v: u8) -> Option<Self> {
        [Self::Unscored, Self::Kept, Self::Dropped].into_iter().find(|x| *x as u8 == v)
    }
}

/// Record: group, reward (f64), entropy (f64), T, L, actions `[t][l]`,
/// actor and old log-probs `[t][l]` (f32), sampler and actor probabilities
/// `[t]` (f32), verdict byte.
pub fn encode_rollouts(rollouts: &[(Rollout, Verdict)]) -> Vec<u8> {
    let mut w = Writer::with_magic(ROLLOUT_MAGIC);
    w.u32(rollouts.len());
    for (ro, v) in rollouts {
        let mut rec = Writer::default();
        rec.raw_u32(ro.group);
        rec.f64(ro.reward);
        rec.f64(ro.entropy);
        let t = ro.actions.len();
        let l = ro.actions.first().map_or(0, Vec::len);
        rec.u32(t);
        rec.u32(l);
        for a in ro.actions.iter().flatten() {
            rec.raw_u32(*a);
        }
        for table in [&ro.actor_logp, &ro.old_logp] {
            for row in table {
                rec.f32s(row);
            }
        }
        rec.f32s(&ro.sampler_prob);
        rec.f32s(&ro.actor_prob);
        rec.u8(*v as u8);
        w.record(&rec.buf);
    }
    w.buf
}

fn rows(flat: Vec<f64>, l: usize) -> Vec<Vec<f64>> {
    flat.chunks(l.max(1)).map(<[f64]>::to_vec).collect()
}

pub fn decode_rollouts(bytes: &[u8]) -> Result<Vec<(Rollout, Verdict)>> {
    let mut r = Reader::with_magic(bytes, ROLLOUT_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::new();
    for i in 0..n {
        let mut rec = Reader::new(r.record()?);
        let group = rec.raw_u32()?;
        let reward = rec.f64()?;
        let entropy = rec.f64()?;
        let (t, l) = (rec.u32()?, rec.u32()?);
        if t == 0 || l == 0 {
            return Err(invalid(format!("rollout {i} has no tokens or levels")));
        }
        let tl = t.checked_mul(l).ok_or_else(|| invalid("rollout size overflows"))?;
        let actions = rec.u32s(tl)?.chunks(l).map(<[u32]>::to_vec).collect();
        let actor_logp = rows(rec.f32s(tl)?, l);
        let old_logp = rows(rec.f32s(tl)?, l);
        let sampler_prob = rec.f32s(t)?;
        let actor_prob = rec.f32s(t)?;
        let verdict = Verdict::from_u8(rec.u8()?).ok_or_else(|| invalid(format!("rollout {i}: unknown verdict")))?;
        rec.finish()?;
        out.push((Rollout { group, reward, actions, actor_logp, old_logp, sampler_prob, actor_prob, entropy }, verdict));
    }
    r.finish()?;
    Ok(out)
}

// ---- generation prompts ----

/// One segment per line:
///
/// ```text
/// text 5 9 12
/// audio 1,0,3,2 4,1,0,0
/// vision 2x2 1,0,0,0 2,1,0,0 0,0,0,0 3,3,1,0
/// ```
///
/// Frames list one token per level, comma separated. `#` starts a comment.
pub fn parse_prompt(text: &str, n_levels: usize) -> Result<Vec<dina_core::seqcodec::Segment>> {
    use dina_core::seqcodec::Segment;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| invalid(format!("prompt line {}: {msg}", i + 1));
        let mut words = line.split_whitespace();
        let kind = words.next().unwrap_or_default();
        let frames = |words: &mut dyn Iterator<Item = &str>| -> Result<Vec<Vec<u32>>> {
            words
                .map(|w| {
                    let f = w
                        .split(',')
                        .map(|t| t.parse::<u32>().map_err(|_| at(format!("bad token {t:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    if f.len() != n_levels {
                        return Err(at(format!("frame {w:?} has {} levels, expected {n_levels}", f.len())));
                    }
                    Ok(f)
                })
                .collect()
        };
        let seg = match kind {
            "text" => {
                let toks = words.map(|t| t.parse::<u32>().map_err(|_| at(format!("bad token {t:?}")))).collect::<Result<Vec<_>>>()?;
                Segment::text(toks, false)
            }
            "audio" => {
                let f = frames(&mut words)?;
                if f.is_empty() {
                    return Err(at("audio segment has no frames".into()));
                }
                Segment::pure_audio(TokenGrid::from_positions(&f)?, false)
            }
            "vision" => {
                let dims = words.next().ok_or_else(|| at("vision needs HxW".into()))?;
                let (h, w) = dims
                    .split_once('x')
                    .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
                    .ok_or_else(|| at(format!("bad image shape {dims:?}")))?;
                let f = frames(&mut words)?;
                if f.len() != h * w {
                    return Err(at(format!("{} frames for a {h}x{w} image", f.len())));
                }
                Segment::vision(TokenGrid::from_positions(&f)?.with_shape(vec![h, w])?, false)
            }
            other => return Err(at(format!("unknown segment kind {other:?}"))),
        };
        out.push(seg);
    }
    if out.is_empty() {
        return Err(invalid("prompt has no segments"));
    }
    Ok(out)
}
