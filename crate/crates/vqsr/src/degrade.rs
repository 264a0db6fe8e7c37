//! Blind degradation simulator: anisotropic Gaussian blur, randomized
//! resizing, Gaussian noise, and a deterministic in-repo DCT compression
//! stage, applied in a seed-shuffled order followed by an exact resize to
//! the target low-resolution size. Every synthesized pair is a pure
//! function of (config, item seed), so benchmarks are reproducible from
//! their manifest alone.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::randn_f64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless per-item seed: mixing the master seed with an index gives
/// independent streams without any sequential RNG state to carry around.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

// ---------------------------------------------------------------------------
// Blur
// ---------------------------------------------------------------------------

/// Discrete anisotropic Gaussian, rotated by `theta`, normalized to sum 1.
/// Returned row-major, `size` x `size`.
pub fn gaussian_kernel(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Input(format!("blur kernel size {size} must be odd")));
    }
    if sigma_x <= 0.0 || sigma_y <= 0.0 {
        return Err(Error::Input(format!(
            "blur sigmas must be positive, got ({sigma_x}, {sigma_y})"
        )));
    }
    let half = (size / 2) as f64;
    let (sin, cos) = theta.sin_cos();
    let mut k = Vec::with_capacity(size * size);
    let mut total = 0.0;
    for iy in 0..size {
        for ix in 0..size {
            let dx = ix as f64 - half;
            let dy = iy as f64 - half;
            // Rotate the offset into the kernel's principal axes.
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let w = (-0.5 * (u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y))).exp();
            k.push(w);
            total += w;
        }
    }
    for w in &mut k {
        *w /= total;
    }
    Ok(k)
}

fn reflect(i: i64, n: i64) -> usize {
    // Mirror without repeating the edge sample: -1 -> 1, n -> n-2.
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-channel 2-D convolution with mirror padding.
pub fn apply_blur(img: &Image, kernel: &[f64], size: usize) -> Result<Image> {
    if kernel.len() != size * size {
        return Err(Error::shape("apply_blur kernel", size * size, kernel.len()));
    }
    let (h, w) = (img.height(), img.width());
    if size > h || size > w {
        return Err(Error::Input(format!(
            "blur kernel {size} larger than image {h}x{w}"
        )));
    }
    let half = (size / 2) as i64;
    let mut out = Image::new(img.channels(), h, w);
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for ky in 0..size {
                    let sy = reflect(y as i64 + ky as i64 - half, h as i64);
                    for kx in 0..size {
                        let sx = reflect(x as i64 + kx as i64 - half, w as i64);
                        acc += kernel[ky * size + kx] * img.get(c, sy, sx) as f64;
                    }
                }
                out.set(c, y, x, acc as f32);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Cubic convolution weight with a = -0.5 (the sharp, widely used variant;
/// reference values downstream depend on this choice).
fn cubic_w(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

pub fn resize(img: &Image, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input("resize to zero size".into()));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if (out_h, out_w) == (h, w) && mode == ResizeMode::Nearest {
        return Ok(img.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Image::new(ch, out_h, out_w);
    let clampf = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
    match mode {
        ResizeMode::Nearest => {
            for y in 0..out_h {
                let sy_i = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                for x in 0..out_w {
                    let sx_i = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                    for c in 0..ch {
                        out.set(c, y, x, img.get(c, sy_i, sx_i));
                    }
                }
            }
        }
        ResizeMode::Bilinear => {
            for y in 0..out_h {
                let fy = clampf((y as f64 + 0.5) * sy - 0.5, h);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ty = fy - y0 as f64;
                for x in 0..out_w {
                    let fx = clampf((x as f64 + 0.5) * sx - 0.5, w);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let tx = fx - x0 as f64;
                    for c in 0..ch {
                        let a = img.get(c, y0, x0) as f64;
                        let b = img.get(c, y0, x1) as f64;
                        let d = img.get(c, y1, x0) as f64;
                        let e = img.get(c, y1, x1) as f64;
                        let top = a + (b - a) * tx;
                        let bot = d + (e - d) * tx;
                        out.set(c, y, x, (top + (bot - top) * ty) as f32);
                    }
                }
            }
        }
        ResizeMode::Bicubic => {
            let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
            for y in 0..out_h {
                let fy = (y as f64 + 0.5) * sy - 0.5;
                let y0 = fy.floor() as i64;
                let ty = fy - y0 as f64;
                let wy: Vec<f64> = (-1..=2).map(|k| cubic_w(ty - k as f64)).collect();
                for x in 0..out_w {
                    let fx = (x as f64 + 0.5) * sx - 0.5;
                    let x0 = fx.floor() as i64;
                    let tx = fx - x0 as f64;
                    let wx: Vec<f64> = (-1..=2).map(|k| cubic_w(tx - k as f64)).collect();
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for (ky, wyv) in wy.iter().enumerate() {
                            let syi = clampi(y0 + ky as i64 - 1, h);
                            for (kx, wxv) in wx.iter().enumerate() {
                                let sxi = clampi(x0 + kx as i64 - 1, w);
                                acc += wyv * wxv * img.get(c, syi, sxi) as f64;
                            }
                        }
                        out.set(c, y, x, acc as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Adds i.i.d. Gaussian noise with `sigma_8bit` given on the 0-255 scale,
/// then clips back into [0, 1].
pub fn add_gaussian_noise(img: &Image, sigma_8bit: f64, rng: &mut impl Rng) -> Image {
    let std = sigma_8bit / 255.0;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + (std * randn_f64(rng)) as f32).clamp(0.0, 1.0);
    }
    out
}

// ---------------------------------------------------------------------------
// Compression
// ---------------------------------------------------------------------------

/// Standard luminance quantization table (zig-zag-free, row-major).
const QUANT_BASE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quality-scaled table via the conventional 5000/q | 200-2q formula, each
/// entry clamped to [1, 255].
fn scaled_quant_table(quality: u8) -> [f64; 64] {
    let q = quality as f64;
    let s = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (i, &base) in QUANT_BASE.iter().enumerate() {
        t[i] = ((base * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct8_cos_table() -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for (x, row) in t.iter_mut().enumerate() {
        for (u, v) in row.iter_mut().enumerate() {
            *v = ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    t
}

/// Deterministic compression artifact generator: per-channel 8x8 block DCT,
/// quantization by the quality-scaled table, dequantization, inverse DCT,
/// clip. Not a bitstream codec - it reproduces the *distortion* of one,
/// bit-identically on every platform.
pub fn jpeg_like(img: &Image, quality: u8) -> Result<Image> {
    if quality == 0 || quality > 100 {
        return Err(Error::Input(format!("quality {quality} outside [1, 100]")));
    }
    let qt = scaled_quant_table(quality);
    let cos = dct8_cos_table();
    let c_of = |u: usize| if u == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
    let (h, w) = (img.height(), img.width());
    let bh = h.div_ceil(8) * 8;
    let bw = w.div_ceil(8) * 8;
    let mut out = img.clone();
    let mut block = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for c in 0..img.channels() {
        for by in (0..bh).step_by(8) {
            for bx in (0..bw).step_by(8) {
                // Gather with edge replication outside the image, centered
                // on the 8-bit signed range like a real codec.
                for (y, row) in block.iter_mut().enumerate() {
                    let sy = (by + y).min(h - 1);
                    for (x, v) in row.iter_mut().enumerate() {
                        let sx = (bx + x).min(w - 1);
                        *v = img.get(c, sy, sx) as f64 * 255.0 - 128.0;
                    }
                }
                // Forward DCT-II.
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for (x, row) in block.iter().enumerate() {
                            for (y, &val) in row.iter().enumerate() {
                                acc += val * cos[x][u] * cos[y][v];
                            }
                        }
                        coef[u][v] = 0.25 * c_of(u) * c_of(v) * acc;
                    }
                }
                // Quantize / dequantize.
                for u in 0..8 {
                    for v in 0..8 {
                        let q = qt[u * 8 + v];
                        coef[u][v] = (coef[u][v] / q).round() * q;
                    }
                }
                // Inverse DCT.
                for (x, row) in block.iter_mut().enumerate() {
                    for (y, val) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, &cv) in crow.iter().enumerate() {
                                acc += c_of(u) * c_of(v) * cv * cos[x][u] * cos[y][v];
                            }
                        }
                        *val = 0.25 * acc;
                    }
                }
                // Scatter back, skipping replicated padding.
                for (y, row) in block.iter().enumerate() {
                    if by + y >= h {
                        break;
                    }
                    for (x, &val) in row.iter().enumerate() {
                        if bx + x >= w {
                            break;
                        }
                        out.set(c, by + y, bx + x, (((val + 128.0) / 255.0).clamp(0.0, 1.0)) as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Final downscale factor; LR is exactly HR/scale.
    pub scale: usize,
    /// Odd bounds, inclusive.
    pub kernel_size_range: (usize, usize),
    pub blur_sigma_range: (f64, f64),
    /// Probability each operator class fires at all.
    pub blur_prob: f64,
    pub mid_resize_prob: f64,
    pub noise_prob: f64,
    pub jpeg_prob: f64,
    /// Intermediate resize factor relative to the HR size; the final exact
    /// resize to HR/scale happens regardless.
    pub mid_resize_range: (f64, f64),
    pub resize_modes: Vec<ResizeMode>,
    /// Noise sigma on the 0-255 scale.
    pub noise_sigma_range: (f64, f64),
    pub jpeg_quality_range: (u8, u8),
    /// When false the operator order is fixed (blur, resize, noise,
    /// compression) instead of per-item shuffled.
    pub shuffle_order: bool,
    pub master_seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            scale: 4,
            kernel_size_range: (7, 21),
            blur_sigma_range: (0.2, 3.0),
            blur_prob: 1.0,
            mid_resize_prob: 1.0,
            noise_prob: 1.0,
            jpeg_prob: 1.0,
            mid_resize_range: (0.5, 1.0),
            resize_modes: vec![ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic],
            noise_sigma_range: (1.0, 25.0),
            jpeg_quality_range: (30, 95),
            shuffle_order: true,
            master_seed: 123,
        }
    }
}

impl DegradationConfig {
    /// Wider-range preset modeling the harsher benchmark variant.
    pub fn plus() -> Self {
        DegradationConfig {
            kernel_size_range: (7, 21),
            blur_sigma_range: (0.2, 4.0),
            mid_resize_range: (0.35, 1.0),
            noise_sigma_range: (1.0, 30.0),
            jpeg_quality_range: (20, 95),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("scale {} must be 2 or 4", self.scale)));
        }
        let (klo, khi) = self.kernel_size_range;
        if klo % 2 == 0 || khi % 2 == 0 || klo == 0 || klo > khi {
            return Err(Error::Config(format!(
                "kernel size range ({klo}, {khi}) must be odd and ordered"
            )));
        }
        for (name, (lo, hi)) in [
            ("blur_sigma", self.blur_sigma_range),
            ("mid_resize", self.mid_resize_range),
            ("noise_sigma", self.noise_sigma_range),
        ] {
            if !(lo <= hi) || lo <= 0.0 {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) invalid")));
            }
        }
        let (qlo, qhi) = self.jpeg_quality_range;
        if qlo == 0 || qhi > 100 || qlo > qhi {
            return Err(Error::Config(format!(
                "quality range ({qlo}, {qhi}) outside [1, 100]"
            )));
        }
        for p in [self.blur_prob, self.mid_resize_prob, self.noise_prob, self.jpeg_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.resize_modes.is_empty() {
            return Err(Error::Config("resize mode set is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpClass {
    Blur,
    MidResize,
    Noise,
    Compress,
}

/// Every random draw for one item, recorded so any LR image can be rebuilt
/// from its manifest entry alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationPlan {
    pub scale: usize,
    pub order: Vec<OpClass>,
    pub blur: Option<(usize, f64, f64, f64)>,
    pub mid_resize: Option<(ResizeMode, f64)>,
    /// Seed for the noise RNG plus the drawn sigma; noise needs fresh
    /// randomness at apply time, unlike the other operators.
    pub noise: Option<(u64, f64)>,
    pub jpeg_quality: Option<u8>,
}

/// Draw one item's full degradation plan. Pure function of (cfg, item_seed).
pub fn plan_degradation(cfg: &DegradationConfig, item_seed: u64) -> Result<DegradationPlan> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);

    let mut order = vec![OpClass::Blur, OpClass::MidResize, OpClass::Noise, OpClass::Compress];
    if cfg.shuffle_order {
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }

    let blur = if rng.gen_bool(cfg.blur_prob) {
        let (klo, khi) = cfg.kernel_size_range;
        let steps = (khi - klo) / 2;
        let size = klo + 2 * rng.gen_range(0..=steps);
        let (slo, shi) = cfg.blur_sigma_range;
        let sx = rng.gen_range(slo..=shi);
        let sy = rng.gen_range(slo..=shi);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        Some((size, sx, sy, theta))
    } else {
        None
    };
    let mid_resize = if rng.gen_bool(cfg.mid_resize_prob) {
        let mode = cfg.resize_modes[rng.gen_range(0..cfg.resize_modes.len())];
        let (flo, fhi) = cfg.mid_resize_range;
        Some((mode, rng.gen_range(flo..=fhi)))
    } else {
        None
    };
    let noise = if rng.gen_bool(cfg.noise_prob) {
        let (nlo, nhi) = cfg.noise_sigma_range;
        Some((rng.gen::<u64>(), rng.gen_range(nlo..=nhi)))
    } else {
        None
    };
    let jpeg_quality = if rng.gen_bool(cfg.jpeg_prob) {
        let (qlo, qhi) = cfg.jpeg_quality_range;
        Some(rng.gen_range(qlo..=qhi))
    } else {
        None
    };

    Ok(DegradationPlan { scale: cfg.scale, order, blur, mid_resize, noise, jpeg_quality })
}

/// Execute a recorded plan. Deterministic given the plan.
pub fn apply_plan(hr: &Image, plan: &DegradationPlan) -> Result<Image> {
    let (h, w) = (hr.height(), hr.width());
    if h % plan.scale != 0 || w % plan.scale != 0 {
        return Err(Error::Input(format!(
            "HR {h}x{w} not divisible by scale {}",
            plan.scale
        )));
    }
    let (out_h, out_w) = (h / plan.scale, w / plan.scale);
    let mut img = hr.clone();
    for op in &plan.order {
        match op {
            OpClass::Blur => {
                if let Some((size, sx, sy, theta)) = plan.blur {
                    let k = gaussian_kernel(size, sx, sy, theta)?;
                    img = apply_blur(&img, &k, size)?;
                }
            }
            OpClass::MidResize => {
                if let Some((mode, factor)) = plan.mid_resize {
                    // Never below the final LR size, never above HR.
                    let mh = ((h as f64 * factor).round() as usize).clamp(out_h, h);
                    let mw = ((w as f64 * factor).round() as usize).clamp(out_w, w);
                    img = resize(&img, mh, mw, mode)?;
                }
            }
            OpClass::Noise => {
                if let Some((seed, sigma)) = plan.noise {
                    let mut nrng = ChaCha8Rng::seed_from_u64(seed);
                    img = add_gaussian_noise(&img, sigma, &mut nrng);
                }
            }
            OpClass::Compress => {
                if let Some(q) = plan.jpeg_quality {
                    img = jpeg_like(&img, q)?;
                }
            }
        }
    }
    let mut lr = resize(&img, out_h, out_w, ResizeMode::Bicubic)?;
    lr.clamp01();
    Ok(lr)
}

/// Synthesize the LR counterpart of one HR image.
pub fn degrade(hr: &Image, cfg: &DegradationConfig, item_seed: u64) -> Result<Image> {
    apply_plan(hr, &plan_degradation(cfg, item_seed)?)
}

// ---------------------------------------------------------------------------
// Test-set synthesis
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PairSample {
    pub source: String,
    pub item_seed: u64,
    pub plan: DegradationPlan,
    pub hr: Image,
    pub lr: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub item_seed: u64,
    pub plan: DegradationPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DegradationConfig,
    pub entries: Vec<ManifestEntry>,
}

/// Deterministic benchmark synthesis: per-item seeds derive from the master
/// seed and the item index, and the manifest records every draw.
pub fn make_testset(
    hr_images: &[(String, Image)],
    cfg: &DegradationConfig,
) -> Result<(Vec<PairSample>, Manifest)> {
    if hr_images.is_empty() {
        return Err(Error::Input("test set needs at least one HR image".into()));
    }
    let mut pairs = Vec::with_capacity(hr_images.len());
    let mut entries = Vec::with_capacity(hr_images.len());
    for (i, (name, hr)) in hr_images.iter().enumerate() {
        let item_seed = derive_seed(cfg.master_seed, i as u64);
        let plan = plan_degradation(cfg, item_seed)?;
        let lr = apply_plan(hr, &plan)?;
        entries.push(ManifestEntry {
            source: name.clone(),
            item_seed,
            plan: plan.clone(),
        });
        pairs.push(PairSample {
            source: name.clone(),
            item_seed,
            plan,
            hr: hr.clone(),
            lr,
        });
    }
    Ok((pairs, Manifest { config: cfg.clone(), entries }))
}
