//! Patch-space vector quantizer: each non-overlapping `f x f` patch maps to the
//! nearest of `N` codebook vectors learned with k-means.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{psnr, Image};

const MAGIC: &[u8; 4] = b"VQCB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VQConfig {
    /// Patch edge in pixels.
    pub f: usize,
    /// Codebook size.
    pub n: usize,
    pub channels: usize,
}

impl Default for VQConfig {
    fn default() -> Self {
        Self { f: 4, n: 512, channels: 3 }
    }
}

impl VQConfig {
    pub fn dim(&self) -> usize {
        self.f * self.f * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.f < 1 || self.n < 2 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::InvalidInput(format!("invalid VQ config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    rows: usize,
    cols: usize,
    ids: Vec<usize>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, ids: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::Shape(format!("{} ids for a {rows}x{cols} grid", ids.len())));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= codebook_size) {
            return Err(Error::TokenOutOfRange { id, limit: codebook_size });
        }
        Ok(Self { rows, cols, ids })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str, codebook_size: usize) -> Result<Self> {
        let g: TokenGrid = serde_json::from_str(s)?;
        Self::new(g.rows, g.cols, g.ids, codebook_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    config: VQConfig,
    /// `n x dim`, row-major.
    vectors: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flattened patches of every image, patch-major, channel-interleaved within a patch.
pub fn extract_patches(img: &Image, f: usize) -> Result<Vec<f64>> {
    let (h, w, c) = img.shape();
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible by patch size {f}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..h / f {
        for pc in 0..w / f {
            for dy in 0..f {
                let start = ((pr * f + dy) * w + pc * f) * c;
                out.extend_from_slice(&img.data()[start..start + f * c]);
            }
        }
    }
    Ok(out)
}

impl Codebook {
    pub fn new(config: VQConfig, vectors: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if vectors.len() != config.n * config.dim() {
            return Err(Error::Shape(format!(
                "{} codebook scalars for n={} d={}",
                vectors.len(),
                config.n,
                config.dim()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook contains non-finite entries".into()));
        }
        Ok(Self { config, vectors })
    }

    pub fn config(&self) -> &VQConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.config.n
    }

    pub fn is_empty(&self) -> bool {
        self.config.n == 0
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        let d = self.config.dim();
        &self.vectors[id * d..(id + 1) * d]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// The first `n` vectors as a smaller codebook.
    pub fn prefix(&self, n: usize) -> Result<Codebook> {
        if n < 2 || n > self.config.n {
            return Err(Error::InvalidInput(format!("prefix size {n} out of range")));
        }
        let config = VQConfig { n, ..self.config };
        Codebook::new(config, self.vectors[..n * config.dim()].to_vec())
    }

    pub fn has_duplicates(&self) -> bool {
        let d = self.config.dim();
        let mut rows: Vec<&[f64]> = self.vectors.chunks_exact(d).collect();
        rows.sort_by(|a, b| {
            a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        rows.windows(2).any(|p| p[0] == p[1])
    }

    /// Index of the nearest vector by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, patch: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, v) in self.vectors.chunks_exact(self.config.dim()).enumerate() {
            let d = sq_dist(patch, v);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn encode(&self, img: &Image) -> Result<TokenGrid> {
        if img.channels() != self.config.channels {
            return Err(Error::Shape(format!(
                "image has {} channels, codebook expects {}",
                img.channels(),
                self.config.channels
            )));
        }
        let f = self.config.f;
        let patches = extract_patches(img, f)?;
        let ids = patches.chunks_exact(self.config.dim()).map(|p| self.nearest(p)).collect();
        TokenGrid::new(img.height() / f, img.width() / f, ids, self.config.n)
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        let (f, c) = (self.config.f, self.config.channels);
        let (h, w) = (grid.rows * f, grid.cols * f);
        let mut data = vec![0.0; h * w * c];
        for (k, &id) in grid.ids.iter().enumerate() {
            if id >= self.config.n {
                return Err(Error::TokenOutOfRange { id, limit: self.config.n });
            }
            let (pr, pc) = (k / grid.cols, k % grid.cols);
            let v = self.vector(id);
            for dy in 0..f {
                let dst = ((pr * f + dy) * w + pc * f) * c;
                data[dst..dst + f * c].copy_from_slice(&v[dy * f * c..(dy + 1) * f * c]);
            }
        }
        Image::from_clamped(h, w, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(20 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [self.config.f, self.config.n, self.config.dim(), self.config.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in &self.vectors {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Codebook> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (f, n, d, channels) = (word(0), word(1), word(2), word(3));
        let config = VQConfig { f, n, channels };
        if config.dim() != d {
            return Err(Error::Format(format!("header dim {d} != f*f*channels {}", config.dim())));
        }
        let body = &bytes[20..];
        if body.len() != n * d * 4 {
            return Err(Error::Format("codebook payload has the wrong length".into()));
        }
        let vectors = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Codebook::new(config, vectors)
    }
}

/// Mean PSNR between each image and its tokenize/de-tokenize reconstruction.
pub fn reconstruction_psnr(images: &[Image], cb: &Codebook) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut total = 0.0;
    for img in images {
        total += psnr(img, &cb.decode(&cb.encode(img)?)?)?;
    }
    Ok(total / images.len() as f64)
}

/// Outcome of k-means training.
#[derive(Clone, Debug)]
pub struct KMeansReport {
    /// Mean squared quantization error after each Lloyd iteration.
    pub distortion: Vec<f64>,
    pub iterations: usize,
}

struct PatchSet {
    data: Vec<f64>,
    dim: usize,
}

impl PatchSet {
    fn gather(images: &[Image], cfg: &VQConfig) -> Result<Self> {
        let mut data = Vec::new();
        for img in images {
            if img.channels() != cfg.channels {
                return Err(Error::Shape(format!("image has {} channels, expected {}", img.channels(), cfg.channels)));
            }
            data.extend(extract_patches(img, cfg.f)?);
        }
        Ok(Self { data, dim: cfg.dim() })
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn distinct(&self) -> usize {
        let mut rows: Vec<Vec<u64>> = (0..self.len()).map(|i| self.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort_unstable();
        rows.dedup();
        rows.len()
    }
}

/// Nearest center for every point (lowest index on ties) plus the squared distance.
fn assign(points: &PatchSet, centers: &[f64], labels: &mut [usize], dists: &mut [f64]) {
    let d = points.dim;
    let k = centers.len() / d;
    let center_norms: Vec<f64> = centers.chunks_exact(d).map(|c| c.iter().map(|v| v * v).sum()).collect();
    const CHUNK: usize = 2048;
    let mut dots = vec![0.0; CHUNK * k];
    for start in (0..points.len()).step_by(CHUNK) {
        let m = CHUNK.min(points.len() - start);
        // dots = X * C^T, then refine the best few candidates with exact distances.
        unsafe {
            matrixmultiply::dgemm(
                m,
                d,
                k,
                1.0,
                points.data[start * d..].as_ptr(),
                d as isize,
                1,
                centers.as_ptr(),
                1,
                d as isize,
                0.0,
                dots.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for r in 0..m {
            let p = points.row(start + r);
            let row = &dots[r * k..(r + 1) * k];
            let approx_min = row
                .iter()
                .zip(&center_norms)
                .map(|(dot, cn)| cn - 2.0 * dot)
                .fold(f64::INFINITY, f64::min);
            let pn: f64 = p.iter().map(|v| v * v).sum();
            // Cancellation error bound for ||p||^2 + ||c||^2 - 2 p.c.
            let slack = 1e-9 * (pn + 1.0) * d as f64;
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, (dot, cn)) in row.iter().zip(&center_norms).enumerate() {
                if cn - 2.0 * dot <= approx_min + slack {
                    let exact = sq_dist(p, &centers[j * d..(j + 1) * d]);
                    if exact < best_d {
                        best_d = exact;
                        best = j;
                    }
                }
            }
            labels[start + r] = best;
            dists[start + r] = best_d;
        }
    }
}

/// k-means++ seeding for centers `frozen..k`, given already-fixed leading centers.
fn seed_centers(points: &PatchSet, centers: &mut Vec<f64>, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = points.dim;
    let n = points.len();
    let mut min_d = vec![f64::INFINITY; n];
    for c in centers.chunks_exact(d) {
        for (i, md) in min_d.iter_mut().enumerate() {
            *md = md.min(sq_dist(points.row(i), c));
        }
    }
    while centers.len() / d < k {
        let pick = if centers.is_empty() {
            rng.random_range(0..n)
        } else {
            let total: f64 = min_d.iter().sum();
            if total <= 0.0 {
                return Err(Error::NotEnoughPatches { needed: k, found: centers.len() / d });
            }
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &md) in min_d.iter().enumerate() {
                if md > 0.0 && target < md {
                    pick = i;
                    break;
                }
                target -= md;
            }
            while min_d[pick] <= 0.0 {
                pick -= 1;
            }
            pick
        };
        let c = points.row(pick).to_vec();
        for (i, md) in min_d.iter_mut().enumerate() {
            *md = md.min(sq_dist(points.row(i), &c));
        }
        centers.extend(c);
    }
    Ok(())
}

fn lloyd(points: &PatchSet, centers: &mut [f64], frozen: usize, iters: usize) -> KMeansReport {
    let d = points.dim;
    let k = centers.len() / d;
    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut distortion = Vec::new();
    let mut iterations = 0;
    assign(points, centers, &mut labels, &mut dists);
    for _ in 0..iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken: Vec<usize> = Vec::new();
        for j in frozen..k {
            if counts[j] > 0 {
                for (c, s) in centers[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                // empty cluster: move it onto the worst-served point
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("at least one point");
                taken.push(far);
                centers[j * d..(j + 1) * d].copy_from_slice(points.row(far));
            }
        }
        let prev = labels.clone();
        assign(points, centers, &mut labels, &mut dists);
        distortion.push(dists.iter().sum::<f64>() / n as f64);
        if labels == prev {
            break;
        }
    }
    KMeansReport { distortion, iterations }
}

fn finish(cfg: VQConfig, mut centers: Vec<f64>) -> Result<Codebook> {
    // stored as f32 on disk; keep the in-memory codebook identical to what loads back
    for v in centers.iter_mut() {
        *v = *v as f32 as f64;
    }
    let cb = Codebook::new(cfg, centers)?;
    if cb.has_duplicates() {
        return Err(Error::InvalidInput("k-means produced duplicate codebook vectors".into()));
    }
    Ok(cb)
}

pub fn train_codebook(images: &[Image], cfg: VQConfig, iters: usize, seed: u64) -> Result<Codebook> {
    train_codebook_with_report(images, cfg, iters, seed).map(|(cb, _)| cb)
}

/// k-means over all non-overlapping patches with k-means++ seeding.
pub fn train_codebook_with_report(
    images: &[Image],
    cfg: VQConfig,
    iters: usize,
    seed: u64,
) -> Result<(Codebook, KMeansReport)> {
    cfg.validate()?;
    let points = PatchSet::gather(images, &cfg)?;
    if points.len() < cfg.n {
        return Err(Error::NotEnoughPatches { needed: cfg.n, found: points.len() });
    }
    let distinct = points.distinct();
    if distinct < cfg.n {
        return Err(Error::NotEnoughPatches { needed: cfg.n, found: distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(cfg.n * cfg.dim());
    seed_centers(&points, &mut centers, cfg.n, &mut rng)?;
    let report = lloyd(&points, &mut centers, 0, iters);
    Ok((finish(cfg, centers)?, report))
}

/// Grows `base` to `new_n` vectors: the existing vectors stay fixed (so `base` is
/// a prefix of the result) and the new ones are fitted with constrained k-means.
pub fn extend_codebook(base: &Codebook, images: &[Image], new_n: usize, iters: usize, seed: u64) -> Result<Codebook> {
    if new_n < base.len() {
        return Err(Error::InvalidInput(format!("cannot shrink codebook from {} to {new_n}", base.len())));
    }
    let cfg = VQConfig { n: new_n, ..base.config };
    let points = PatchSet::gather(images, &cfg)?;
    let distinct = points.distinct();
    if distinct < new_n {
        return Err(Error::NotEnoughPatches { needed: new_n, found: distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = base.vectors.clone();
    seed_centers(&points, &mut centers, new_n, &mut rng)?;
    lloyd(&points, &mut centers, base.len(), iters);
    let mut cb = finish(cfg, centers)?;
    cb.vectors[..base.vectors.len()].copy_from_slice(&base.vectors);
    Ok(cb)
}
