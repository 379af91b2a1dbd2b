//! Information-recovery probe: how much of an image survives a frozen
//! residual-block encoder, as measured by a pixel decoder trained on top.
//!
//! The decoder is fitted in two stages. A ridge least-squares linear map is
//! solved in closed form, then a small GELU residual (zero-initialized output)
//! is refined with Adam on the same pixel MSE.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::Graph;
use crate::error::{config_err, input_err, Error, Result};
use crate::math;
use crate::nn::{FeedForward, Linear};
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(input_err!("{} pixels for a {height}x{width} image", pixels.len()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Blobs,
    Glyph,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Gradient, Pattern::Checkerboard, Pattern::Blobs, Pattern::Glyph];
}

/// Renders one synthetic image.
pub fn render<R: Rng + ?Sized>(pattern: Pattern, size: usize, rng: &mut R) -> Image {
    let s = size as f64;
    let mut px = vec![0.0; size * size];
    match pattern {
        Pattern::Gradient => {
            let angle = rng.gen_range(0.0..core::f64::consts::TAU);
            let (c, sn) = (math::cos(angle), math::sin(angle));
            let (lo, hi) = (rng.gen_range(0.0..0.4), rng.gen_range(0.6..1.0));
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f64 / s - 0.5) * c + (y as f64 / s - 0.5) * sn) / core::f64::consts::SQRT_2 + 0.5;
                    px[y * size + x] = lo + (hi - lo) * u;
                }
            }
        }
        Pattern::Checkerboard => {
            let cell = rng.gen_range(2..=(size / 4).max(2));
            let (a, b) = (rng.gen_range(0.0..0.4), rng.gen_range(0.6..1.0));
            let (oy, ox) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            for y in 0..size {
                for x in 0..size {
                    px[y * size + x] = if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 { a } else { b };
                }
            }
        }
        Pattern::Blobs => {
            let base = rng.gen_range(0.0..0.3);
            px.iter_mut().for_each(|p| *p = base);
            for _ in 0..rng.gen_range(1..=4) {
                let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let sigma = rng.gen_range(s / 16.0..s / 4.0);
                let amp = rng.gen_range(0.3..0.8);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy) * (y as f64 - cy) + (x as f64 - cx) * (x as f64 - cx);
                        px[y * size + x] += amp * math::exp(-d2 / (2.0 * sigma * sigma));
                    }
                }
            }
        }
        Pattern::Glyph => {
            // strokes on a coarse grid, like block letters
            let (bg, fg) = (rng.gen_range(0.0..0.3), rng.gen_range(0.7..1.0));
            px.iter_mut().for_each(|p| *p = bg);
            let grid = 5;
            let unit = size / (grid + 1);
            let thick = (unit / 2).max(1);
            for _ in 0..rng.gen_range(2..=5) {
                let horizontal = rng.gen_bool(0.5);
                let fixed = rng.gen_range(0..grid) * unit + unit / 2;
                let a = rng.gen_range(0..grid - 1);
                let b = rng.gen_range(a + 1..grid);
                let (from, to) = (a * unit + unit / 2, b * unit + unit / 2 + thick);
                for t in from..to.min(size) {
                    for k in fixed..(fixed + thick).min(size) {
                        let (y, x) = if horizontal { (k, t) } else { (t, k) };
                        px[y * size + x] = fg;
                    }
                }
            }
        }
    }
    for p in &mut px {
        *p = p.clamp(0.0, 1.0);
    }
    Image { height: size, width: size, pixels: px }
}

/// `n` images cycling through the four patterns, seeded per image.
pub fn synthetic_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n).map(|i| render(Pattern::ALL[i % 4], size, &mut math::rng_for(seed, i as u64))).collect()
}

/// `patches × patch²` matrix in raster order.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(input_err!("{}x{} image does not tile into {patch}x{patch} patches", img.height, img.width));
    }
    let (ph, pw) = (img.height / patch, img.width / patch);
    let mut out = Tensor::zeros(ph * pw, patch * patch);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            for dy in 0..patch {
                for dx in 0..patch {
                    row[dy * patch + dx] = img.at(py * patch + dy, px * patch + dx);
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(t: &Tensor, height: usize, width: usize, patch: usize) -> Result<Image> {
    let (ph, pw) = (height / patch, width / patch);
    if t.rows != ph * pw || t.cols != patch * patch {
        return Err(input_err!("{}x{} patch matrix does not match a {height}x{width} image", t.rows, t.cols));
    }
    let mut px = vec![0.0; height * width];
    for r in 0..t.rows {
        let (py, pxx) = (r / pw, r % pw);
        for dy in 0..patch {
            for dx in 0..patch {
                px[(py * patch + dy) * width + pxx * patch + dx] = t[(r, dy * patch + dx)];
            }
        }
    }
    Ok(Image { height, width, pixels: px })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Random-init blocks with residual connections.
    Random,
    /// Identity projection and zero blocks.
    Identity,
    /// Random-init blocks, residual connections removed.
    NoResidual,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "random" => Ok(Self::Random),
            "identity" => Ok(Self::Identity),
            "no-residual" => Ok(Self::NoResidual),
            other => Err(config_err!("unknown encoder kind '{other}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Identity => "identity",
            Self::NoResidual => "no-residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::Random, patch: 8, width: 64, blocks: 6, hidden: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncBlock {
    gain: Vec<f64>,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

/// Frozen encoder: `x_0 = patches·P`, then `x_l = x_{l-1} + F_l(x_{l-1})`
/// (or `F_l(x_{l-1})` without residuals), `F(x) = W2·gelu(W1·rmsnorm(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEncoder {
    pub patch: usize,
    pub residual: bool,
    proj: Tensor,
    blocks: Vec<EncBlock>,
}

impl ResidualEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.patch * cfg.patch;
        if cfg.patch == 0 || cfg.width == 0 || cfg.hidden == 0 {
            return Err(config_err!("encoder dimensions must be positive"));
        }
        let mut rng = math::rng(cfg.seed);
        let (proj, blocks) = match cfg.kind {
            EncoderKind::Identity => {
                if cfg.width != d {
                    return Err(config_err!("identity encoder needs width {d}, got {}", cfg.width));
                }
                let zero = EncBlock {
                    gain: vec![1.0; d],
                    w1: Tensor::zeros(d, cfg.hidden),
                    b1: vec![0.0; cfg.hidden],
                    w2: Tensor::zeros(cfg.hidden, d),
                    b2: vec![0.0; d],
                };
                (Tensor::identity(d), vec![zero; cfg.blocks])
            }
            EncoderKind::Random | EncoderKind::NoResidual => {
                let proj = Tensor::randn(d, cfg.width, 1.0 / math::sqrt(d as f64), &mut rng);
                let blocks = (0..cfg.blocks)
                    .map(|_| EncBlock {
                        gain: vec![1.0; cfg.width],
                        w1: Tensor::randn(cfg.width, cfg.hidden, 1.0 / math::sqrt(cfg.width as f64), &mut rng),
                        b1: vec![0.0; cfg.hidden],
                        w2: Tensor::randn(cfg.hidden, cfg.width, 1.0 / math::sqrt(cfg.hidden as f64), &mut rng),
                        b2: vec![0.0; cfg.width],
                    })
                    .collect();
                (proj, blocks)
            }
        };
        Ok(Self { patch: cfg.patch, residual: cfg.kind != EncoderKind::NoResidual, proj, blocks })
    }

    pub fn width(&self) -> usize {
        self.proj.cols
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Tensor {
        let mut x = patches.matmul(&self.proj);
        for b in &self.blocks {
            let f = block_forward(b, &x);
            if self.residual {
                x.add_assign(&f);
            } else {
                x = f;
            }
        }
        x
    }

    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        Ok(self.encode_patches(&patchify(img, self.patch)?))
    }
}

fn block_forward(b: &EncBlock, x: &Tensor) -> Tensor {
    let mut n = x.clone();
    for r in 0..n.rows {
        let row = n.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / math::sqrt(ms + 1e-6);
        for (v, g) in row.iter_mut().zip(&b.gain) {
            *v *= inv * g;
        }
    }
    let mut h = n.matmul(&b.w1);
    for r in 0..h.rows {
        for (v, bias) in h.row_mut(r).iter_mut().zip(&b.b1) {
            *v = math::gelu(*v + bias);
        }
    }
    let mut out = h.matmul(&b.w2);
    for r in 0..out.rows {
        for (v, bias) in out.row_mut(r).iter_mut().zip(&b.b2) {
            *v += bias;
        }
    }
    out
}

/// `10·log10(max²/mse)`; identical inputs give `+∞`.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(max_val * max_val / mse))
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights, population
/// statistics), with `C1 = (0.01·max)²` and `C2 = (0.03·max)²`.
pub fn ssim(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let w = SSIM_WINDOW;
    if a.height < w || a.width < w {
        return Err(input_err!("image smaller than the {w}x{w} SSIM window"));
    }
    let c1 = (0.01 * max_val) * (0.01 * max_val);
    let c2 = (0.03 * max_val) * (0.03 * max_val);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=a.height - w {
        for x0 in 0..=a.width - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + w {
                for x in x0..x0 + w {
                    let (p, q) = (a.at(y, x), b.at(y, x));
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(input_err!("shape mismatch: {}x{} vs {}x{}", a.height, a.width, b.height, b.width));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Images reconstructed exactly (PSNR unbounded).
    pub unbounded: usize,
}

impl QualityReport {
    pub fn evaluate(originals: &[Image], recon: &[Image]) -> Result<Self> {
        if originals.is_empty() || originals.len() != recon.len() {
            return Err(input_err!("{} originals vs {} reconstructions", originals.len(), recon.len()));
        }
        let psnr: Vec<f64> = originals.iter().zip(recon).map(|(a, b)| psnr(a, b, 1.0)).collect::<Result<_>>()?;
        let ssim: Vec<f64> = originals.iter().zip(recon).map(|(a, b)| ssim(a, b, 1.0)).collect::<Result<_>>()?;
        let n = psnr.len() as f64;
        Ok(Self {
            mean_psnr: psnr.iter().sum::<f64>() / n,
            mean_ssim: ssim.iter().sum::<f64>() / n,
            unbounded: psnr.iter().filter(|p| p.is_infinite()).count(),
            psnr,
            ssim,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Ridge strength relative to the mean diagonal of the Gram matrix.
    pub ridge: f64,
    pub hidden: usize,
    pub refine_steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { ridge: 1e-8, hidden: 64, refine_steps: 50, lr: 1e-4, seed: 0 }
    }
}

/// Per-patch pixel decoder: `linear(z) + mlp(z)`. The returned parameters
/// are the ones with the lowest training MSE seen during refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDecoder {
    pub store: ParamStore,
    pub linear: Linear,
    pub mlp: FeedForward,
}

impl PixelDecoder {
    pub fn decode_patches(&self, z: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(z.clone());
        let y = self.forward(&mut g, x);
        g.value(y).clone()
    }

    fn forward(&self, g: &mut Graph, x: crate::autograd::Var) -> crate::autograd::Var {
        let lin = self.linear.forward(g, &self.store, x);
        let res = self.mlp.forward(g, &self.store, x);
        g.add(lin, res)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub decoder: PixelDecoder,
    pub report: QualityReport,
    /// Training-set pixel MSE after the closed-form fit, then after each refinement step.
    pub train_mse: Vec<f64>,
}

/// Fits a decoder on `train` through the frozen `encoder` and evaluates on `test`.
pub fn train_probe(encoder: &ResidualEncoder, train: &[Image], test: &[Image], cfg: &DecoderConfig) -> Result<ProbeResult> {
    if train.is_empty() {
        return Err(input_err!("no training images"));
    }
    let mut zs = Vec::new();
    let mut ys = Vec::new();
    for img in train {
        let p = patchify(img, encoder.patch)?;
        zs.push(encoder.encode_patches(&p));
        ys.push(p);
    }
    let z = stack(&zs);
    let y = stack(&ys);
    // the refinement MLP maps width → width, so it can only add onto pixels of the same size
    if z.cols != y.cols {
        return Err(config_err!("decoder needs encoder width {} to equal patch size {}", z.cols, y.cols));
    }
    let (w, b) = ridge_fit(&z, &y, cfg.ridge)?;

    let mut store = ParamStore::new();
    let mut rng = math::rng(cfg.seed);
    let linear = Linear::new(&mut store, "decoder.linear", z.cols, y.cols, true, 0.0, &mut rng);
    *store.get_mut(linear.weight) = w;
    *store.get_mut(linear.bias.expect("bias")) = b;
    let mlp = FeedForward::new(&mut store, "decoder.mlp", z.cols, cfg.hidden, 0.0, &mut rng);
    let mut dec = PixelDecoder { store, linear, mlp };

    let n = y.len() as f64;
    let mut adam = Adam::new(&dec.store, cfg.lr);
    let frozen = [Some(dec.linear.weight), dec.linear.bias];
    let mut best = (f64::INFINITY, dec.store.clone());
    let mut train_mse = Vec::with_capacity(cfg.refine_steps + 1);
    for step in 0..=cfg.refine_steps {
        let mut g = Graph::new();
        let x = g.constant(z.clone());
        let out = dec.forward(&mut g, x);
        let se = g.squared_error(out, y.clone());
        let loss = g.scale(se, 1.0 / n);
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { step: step as u64, detail: format!("decoder pixel loss {v}") });
        }
        train_mse.push(v);
        if v < best.0 {
            best = (v, dec.store.clone());
        }
        if step == cfg.refine_steps {
            break;
        }
        let mut grads = g.backward(loss).for_params(&dec.store);
        // the least-squares map is already optimal on its own; only the residual MLP moves
        for id in frozen.into_iter().flatten() {
            grads[id.0] = Tensor::zeros(grads[id.0].rows, grads[id.0].cols);
        }
        adam.update(&mut dec.store, &grads, cfg.lr);
    }
    dec.store = best.1;

    let recon = test
        .iter()
        .map(|img| {
            let z = encoder.encode(img)?;
            unpatchify(&dec.decode_patches(&z), img.height, img.width, encoder.patch)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = QualityReport::evaluate(test, &recon)?;
    Ok(ProbeResult { decoder: dec, report, train_mse })
}

fn stack(ts: &[Tensor]) -> Tensor {
    let cols = ts[0].cols;
    let data = ts.iter().flat_map(|t| t.data.iter().copied()).collect::<Vec<_>>();
    Tensor::from_vec(data.len() / cols, cols, data)
}

/// Least squares `y ≈ z·W + b` with ridge on `W` only.
fn ridge_fit(z: &Tensor, y: &Tensor, ridge: f64) -> Result<(Tensor, Tensor)> {
    let d = z.cols;
    let mut a = Tensor::zeros(d + 1, d + 1);
    let mut rhs = Tensor::zeros(d + 1, y.cols);
    for r in 0..z.rows {
        let zr = z.row(r);
        let yr = y.row(r);
        for i in 0..=d {
            let zi = if i < d { zr[i] } else { 1.0 };
            for j in 0..=d {
                let zj = if j < d { zr[j] } else { 1.0 };
                a[(i, j)] += zi * zj;
            }
            for (k, &yk) in yr.iter().enumerate() {
                rhs[(i, k)] += zi * yk;
            }
        }
    }
    let mean_diag = (0..d).map(|i| a[(i, i)]).sum::<f64>() / d as f64;
    for i in 0..d {
        a[(i, i)] += ridge * mean_diag.max(1e-12);
    }
    // keep the bias row well posed when the data never varies
    a[(d, d)] += 1e-12;
    let sol = cholesky_solve(&a, &rhs)?;
    let w = Tensor::from_vec(d, y.cols, sol.data[..d * y.cols].to_vec());
    let b = Tensor::from_vec(1, y.cols, sol.data[d * y.cols..].to_vec());
    Ok((w, b))
}

/// Solves `A·X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows;
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let d = a[(i, i)] - s;
                if !(d > 0.0) {
                    return Err(input_err!("matrix is not positive definite at pivot {i}"));
                }
                l[(i, i)] = math::sqrt(d);
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[(i, k)] * x[(k, c)]).sum();
            x[(i, c)] = (x[(i, c)] - s) / l[(i, i)];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[(k, c)]).sum();
            x[(i, c)] = (x[(i, c)] - s) / l[(i, i)];
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            n_train: 32,
            n_test: 8,
            image_size: 64,
        }
    }
}

/// Builds data and encoder from `seed` and runs [`train_probe`].
pub fn run_probe(cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    let train = synthetic_images(cfg.n_train, cfg.image_size, seed);
    let test = synthetic_images(cfg.n_test, cfg.image_size, seed ^ 0x5eed_7e57);
    let enc = ResidualEncoder::new(&EncoderConfig { seed, ..cfg.encoder.clone() })?;
    let dec = DecoderConfig { seed, ..cfg.decoder.clone() };
    train_probe(&enc, &train, &test, &dec)
}

pub fn describe(report: &QualityReport) -> String {
    format!("mean PSNR {:.3} dB, mean SSIM {:.4}", report.mean_psnr, report.mean_ssim)
}
