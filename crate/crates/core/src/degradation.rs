//! LQ synthesis (blur → downscale → noise → block-DCT compression → upscale)
//! and an analytic degradation estimator used for perception labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_kernel_1d, to_luma, Image};
use crate::vocab::Special;

pub const MAX_BLUR_SIGMA: f64 = 3.0;
pub const MAX_NOISE_SIGMA: f64 = 0.12;
/// Quality value that switches the compression stage off.
pub const QUALITY_DISABLED: u32 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub downscale: usize,
    pub compression_quality: u32,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl DegradationConfig {
    pub fn identity() -> Self {
        Self { blur_sigma: 0.0, noise_sigma: 0.0, downscale: 1, compression_quality: QUALITY_DISABLED, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_BLUR_SIGMA).contains(&self.blur_sigma) {
            return Err(Error::InvalidInput(format!("blur_sigma {} not in [0, 3]", self.blur_sigma)));
        }
        if !(0.0..=MAX_NOISE_SIGMA).contains(&self.noise_sigma) {
            return Err(Error::InvalidInput(format!("noise_sigma {} not in [0, 0.12]", self.noise_sigma)));
        }
        if ![1, 2, 4].contains(&self.downscale) {
            return Err(Error::InvalidInput(format!("downscale {} not in {{1, 2, 4}}", self.downscale)));
        }
        let q = self.compression_quality;
        if q != QUALITY_DISABLED && !(30..=95).contains(&q) {
            return Err(Error::InvalidInput(format!("compression_quality {q} not in [30, 95] or 100")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Small,
    Medium,
    Large,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Small, Level::Medium, Level::Large];

    /// Buckets `value` as small below `bounds[0]`, medium below `bounds[1]`, large otherwise.
    pub fn from_thresholds(value: f64, bounds: [f64; 2]) -> Level {
        if value < bounds[0] {
            Level::Small
        } else if value < bounds[1] {
            Level::Medium
        } else {
            Level::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Small => "small",
            Level::Medium => "medium",
            Level::Large => "large",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Level::Small),
            "medium" => Ok(Level::Medium),
            "large" => Ok(Level::Large),
            _ => Err(Error::InvalidInput(format!("unknown level {s:?}"))),
        }
    }
}

/// Score thresholds for the analytic estimator, fitted against generator truth on
/// the default synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelThresholds {
    pub noise: [f64; 2],
    pub blur: [f64; 2],
}

impl Default for LevelThresholds {
    fn default() -> Self {
        Self { noise: [0.0032, 0.0069], blur: [0.8075, 0.835] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationScore {
    pub noise_score: f64,
    pub blur_score: f64,
    pub noise_level: Level,
    pub blur_level: Level,
}

/// Runs the full synthesis pipeline. Deterministic in `(hq, cfg)`; stages whose
/// parameter is the identity are skipped, so the identity config is a no-op.
pub fn degrade(hq: &Image, cfg: &DegradationConfig) -> Result<Image> {
    cfg.validate()?;
    let (h, w, _) = hq.shape();
    if h % cfg.downscale != 0 || w % cfg.downscale != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by downscale {}", cfg.downscale)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut img = hq.clone();
    if cfg.blur_sigma > 0.0 {
        img = gaussian_blur(&img, cfg.blur_sigma);
    }
    if cfg.downscale > 1 {
        img = resize_bilinear(&img, h / cfg.downscale, w / cfg.downscale);
    }
    if cfg.noise_sigma > 0.0 {
        img = add_gaussian_noise(&img, cfg.noise_sigma, &mut rng);
    }
    if cfg.compression_quality != QUALITY_DISABLED {
        img = block_dct_compress(&img, cfg.compression_quality);
    }
    if cfg.downscale > 1 {
        img = resize_bilinear(&img, h, w);
    }
    Ok(img)
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, replicated borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel_1d(sigma, radius);
    let (h, w, c) = img.shape();
    let src = img.data();
    let r = radius as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = clampi(x as isize + i as isize - r, w);
                    acc += kv * src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = clampi(y as isize + i as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image::from_clamped(h, w, c, out).expect("shape preserved")
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
/// An integer 2x reduction is exactly a 2x2 box average.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = img.shape();
    let src = img.data();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, sx, w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image::from_clamped(out_h, out_w, c, out).expect("shape preserved")
}

pub fn add_gaussian_noise(img: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let (h, w, c) = img.shape();
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + sigma * n
        })
        .collect();
    Image::from_clamped(h, w, c, data).expect("shape preserved")
}

const JPEG_LUMA_QTABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table scaled by quality with the IJG convention.
pub fn scaled_qtable(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(JPEG_LUMA_QTABLE.iter()) {
        *o = ((base * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// JPEG-like lossy compression: per channel, 8x8 orthonormal DCT on 8-bit-scaled,
/// level-shifted values, coefficient quantization with [`scaled_qtable`], inverse DCT.
/// Partial edge blocks are padded by replication and cropped afterwards.
pub fn block_dct_compress(img: &Image, quality: u32) -> Image {
    let (h, w, c) = img.shape();
    let qt = scaled_qtable(quality);
    let basis = dct_basis();
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let y = (by + i).min(h - 1);
                        let x = (bx + j).min(w - 1);
                        *v = src[(y * w + x) * c + ch] * 255.0 - 128.0;
                    }
                }
                // coef = B * block * B^T
                for u in 0..8 {
                    for j in 0..8 {
                        tmp[u][j] = (0..8).map(|i| basis[u][i] * block[i][j]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let cf: f64 = (0..8).map(|j| tmp[u][j] * basis[v][j]).sum();
                        let q = qt[u * 8 + v];
                        coef[u][v] = (cf / q).round() * q;
                    }
                }
                // block = B^T * coef * B
                for i in 0..8 {
                    for v in 0..8 {
                        tmp[i][v] = (0..8).map(|u| basis[u][i] * coef[u][v]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, x) = (by + i, bx + j);
                        if y < h && x < w {
                            let val: f64 = (0..8).map(|v| tmp[i][v] * basis[v][j]).sum();
                            out[(y * w + x) * c + ch] = (val + 128.0) / 255.0;
                        }
                    }
                }
            }
        }
    }
    Image::from_clamped(h, w, c, out).expect("shape preserved")
}

fn luma_plane(img: &Image) -> Vec<f64> {
    if img.channels() == 1 {
        img.data().to_vec()
    } else {
        to_luma(img).expect("rgb").into_data()
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust noise sigma: `1.4826 * MAD / sqrt(6)` over the horizontal and vertical
/// second-difference residuals of luma (each has standard deviation `sigma * sqrt(6)`
/// under i.i.d. noise on a locally linear signal).
pub fn noise_score(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = luma_plane(img);
    let mut res = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for c in 1..w.saturating_sub(1) {
            let i = r * w + c;
            res.push(y[i - 1] - 2.0 * y[i] + y[i + 1]);
        }
    }
    for r in 1..h.saturating_sub(1) {
        for c in 0..w {
            let i = r * w + c;
            res.push(y[i - w] - 2.0 * y[i] + y[i + w]);
        }
    }
    let med = median(&mut res.clone());
    let mut dev: Vec<f64> = res.iter().map(|v| (v - med).abs()).collect();
    1.4826 * median(&mut dev) / 6f64.sqrt()
}

const EDGE_LOCATE_SIGMA: f64 = 1.0;
const EDGE_MEASURE_SIGMA: f64 = 0.7;
const EDGE_FRACTION: f64 = 0.04;
const EDGE_WINDOW: usize = 3;
/// Ratio between the squared-gradient floor that noise leaves after the
/// measurement pre-blur and `noise_score²`, fitted on the synthetic pipeline.
const NOISE_GRADIENT_GAIN: f64 = 13.0;

fn squared_gradients(y: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; h * w];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let i = r * w + c;
            let gx = 0.5 * (y[i + 1] - y[i - 1]);
            let gy = 0.5 * (y[i + w] - y[i - w]);
            g[i] = gx * gx + gy * gy;
        }
    }
    g
}

/// Edge sharpness of luma: RMS gradient over the strongest edges divided by the
/// RMS local intensity range around them, with the expected noise contribution
/// to the gradient energy subtracted. Roughly the inverse of edge width; 0 for
/// images without edges.
pub fn edge_sharpness(img: &Image, noise_score: f64) -> f64 {
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let luma = Image::from_clamped(h, w, 1, luma_plane(img)).expect("luma plane matches its shape");
    let locate = gaussian_blur(&luma, EDGE_LOCATE_SIGMA).into_data();
    let measure = gaussian_blur(&luma, EDGE_MEASURE_SIGMA).into_data();
    let gl = squared_gradients(&locate, h, w);
    let gm = squared_gradients(&measure, h, w);
    let mut idx: Vec<usize> = (1..h - 1).flat_map(|r| (1..w - 1).map(move |c| r * w + c)).collect();
    idx.sort_by(|&a, &b| gl[b].total_cmp(&gl[a]).then(a.cmp(&b)));
    let take = ((idx.len() as f64 * EDGE_FRACTION) as usize).max(1);
    let bias = NOISE_GRADIENT_GAIN * noise_score * noise_score;
    let (mut energy, mut range) = (0.0, 0.0);
    for &i in &idx[..take] {
        let (r, c) = (i / w, i % w);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for rr in r.saturating_sub(EDGE_WINDOW)..=(r + EDGE_WINDOW).min(h - 1) {
            for cc in c.saturating_sub(EDGE_WINDOW)..=(c + EDGE_WINDOW).min(w - 1) {
                lo = lo.min(locate[rr * w + cc]);
                hi = hi.max(locate[rr * w + cc]);
            }
        }
        energy += gm[i] - bias;
        range += (hi - lo) * (hi - lo);
    }
    if range <= 1e-12 {
        return 0.0;
    }
    (energy.max(0.0) / range).sqrt()
}

/// `1 / (1 + edge_sharpness)`: 1 for edgeless images, lower for crisper edges.
pub fn blur_score(img: &Image) -> f64 {
    blur_score_given_noise(img, noise_score(img))
}

fn blur_score_given_noise(img: &Image, noise_score: f64) -> f64 {
    1.0 / (1.0 + edge_sharpness(img, noise_score))
}

pub fn estimate_degradation(lq: &Image) -> DegradationScore {
    estimate_degradation_with(lq, &LevelThresholds::default())
}

pub fn estimate_degradation_with(lq: &Image, thresholds: &LevelThresholds) -> DegradationScore {
    let noise_score = noise_score(lq);
    let blur_score = blur_score_given_noise(lq, noise_score);
    DegradationScore {
        noise_score,
        blur_score,
        noise_level: Level::from_thresholds(noise_score, thresholds.noise),
        blur_level: Level::from_thresholds(blur_score, thresholds.blur),
    }
}

/// Maps the two levels onto their dedicated vocabulary tokens.
pub fn level_tokens(score: &DegradationScore) -> (Special, Special) {
    (Special::Noise(score.noise_level), Special::Blur(score.blur_level))
}
