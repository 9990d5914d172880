//! Autoregressive decoding: forced phase structure, classifier-free guidance,
//! fixed or entropy-adaptive Top-k, and per-token entropy traces.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::Level;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::linalg::softmax_in_place;
use crate::model::{forward, KvCache, ModelParams};
use crate::vocab::{uncond_prefix, Segment, SequenceLayout, Special, TokenSequence, Vocabulary};

/// Longest caption the decoder will emit before forcing `<cap_end>`.
pub const MAX_CAPTION_WORDS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FixedTopK(usize),
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub k_min: usize,
    pub k_max: usize,
    pub mu: f64,
    pub temperature: f64,
    pub guidance_weight: f64,
    pub text_top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dynamic,
            k_min: 1,
            k_max: 2000,
            mu: 5.0,
            temperature: 0.9,
            guidance_weight: 0.8,
            text_top_k: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sampler: {m}")));
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad("need 1 <= k_min <= k_max");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if !(self.guidance_weight >= 0.0) {
            return bad("guidance_weight must be >= 0");
        }
        if self.text_top_k == 0 || matches!(self.strategy, Strategy::FixedTopK(0)) {
            return bad("top-k values must be >= 1");
        }
        Ok(())
    }

    pub fn top1() -> Self {
        Self { strategy: Strategy::FixedTopK(1), ..Self::default() }
    }

    /// Fixed Top-k at `k_max` (clamped to the image-id count when decoding).
    pub fn top_kmax() -> Self {
        let d = Self::default();
        Self { strategy: Strategy::FixedTopK(d.k_max), ..d }
    }
}

/// Natural-log entropy with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidDistribution("entries must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>().max(0.0))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Real-valued `k_min + (k_max − k_min)·σ(H − μ)` before flooring.
pub fn dynamic_k_value(h: f64, k_min: usize, k_max: usize, mu: f64) -> f64 {
    k_min as f64 + (k_max - k_min) as f64 * sigmoid(h - mu)
}

/// Entropy-adaptive Top-k: floor of [`dynamic_k_value`], clamped to `[k_min, k_max]`.
pub fn dynamic_k(h: f64, k_min: usize, k_max: usize, mu: f64) -> usize {
    (dynamic_k_value(h, k_min, k_max, mu).floor() as usize).clamp(k_min, k_max)
}

/// `cond + w·(cond − uncond)`.
pub fn apply_guidance(cond: &[f64], uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape(format!("guidance over {} vs {} logits", cond.len(), uncond.len())));
    }
    Ok(cond.iter().zip(uncond).map(|(c, u)| c + w * (c - u)).collect())
}

/// Temperature-scaled softmax over the candidate logits.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    softmax_in_place(&mut p);
    p
}

/// Top-k sampling over `allowed` ids of a full logit vector. Ties in the
/// truncation go to the lower id; the draw is an inverse-CDF lookup of one
/// uniform variate (none is drawn when a single candidate survives).
pub fn sample_token(logits: &[f64], k: usize, temperature: f64, rng: &mut impl Rng, allowed: &[usize]) -> Result<usize> {
    if allowed.is_empty() {
        return Err(Error::InvalidInput("no allowed tokens".into()));
    }
    if k == 0 || !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!("k={k}, temperature={temperature}")));
    }
    if let Some(&bad) = allowed.iter().find(|&&id| id >= logits.len()) {
        return Err(Error::TokenOutOfRange { id: bad, limit: logits.len() });
    }
    let mut cand: Vec<(usize, f64)> = allowed.iter().map(|&id| (id, logits[id] / temperature)).collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(k.min(cand.len()));
    if cand.len() == 1 {
        return Ok(cand[0].0);
    }
    let max = cand[0].1;
    let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (c, w) in cand.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(c.0);
        }
    }
    Ok(cand[cand.len() - 1].0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Raster index in the HQ grid.
    pub position: usize,
    pub entropy: f64,
    pub k: usize,
    pub id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntropyTrace {
    pub entries: Vec<TraceEntry>,
}

impl EntropyTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.entropy).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "position,entropy,k,id")?;
        for e in &self.entries {
            writeln!(f, "{},{:.9},{},{}", e.position, e.entropy, e.k, e.id)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Grayscale map of the trace on the token grid, upscaled by `f`: darker is
/// higher entropy; a constant trace maps to 0.5.
pub fn entropy_heatmap(trace: &EntropyTrace, rows: usize, cols: usize, f: usize) -> Result<Image> {
    if trace.len() != rows * cols {
        return Err(Error::Shape(format!("trace of {} for a {rows}x{cols} grid", trace.len())));
    }
    if f == 0 {
        return Err(Error::InvalidInput("upscale factor must be >= 1".into()));
    }
    let h = trace.entropies();
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shade = |v: f64| if hi > lo { 1.0 - (v - lo) / (hi - lo) } else { 0.5 };
    let mut data = vec![0.0; rows * f * cols * f];
    for y in 0..rows * f {
        for x in 0..cols * f {
            data[y * cols * f + x] = shade(h[(y / f) * cols + x / f]);
        }
    }
    Image::from_clamped(rows * f, cols * f, 1, data)
}

/// One conditioning stream: a KV cache or, as a reference, full re-forward.
enum Stream {
    Cached(KvCache),
    Reforward(Vec<usize>),
}

impl Stream {
    fn new(p: &ModelParams, cached: bool) -> Self {
        if cached {
            Stream::Cached(KvCache::new(p.config()))
        } else {
            Stream::Reforward(Vec::new())
        }
    }

    fn feed(&mut self, p: &ModelParams, ids: &[usize]) -> Result<Vec<f64>> {
        match self {
            Stream::Cached(c) => c.extend(p, ids),
            Stream::Reforward(all) => {
                all.extend_from_slice(ids);
                let logits = forward(p, all)?;
                let v = p.config().vocab_size;
                Ok(logits[(all.len() - 1) * v..].to_vec())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Re-run the full sequence each step instead of using the KV cache.
    pub reforward: bool,
    /// Keep the conditional logits of every generated step.
    pub keep_logits: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { reforward: false, keep_logits: false }
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Prefix followed by everything generated.
    pub sequence: TokenSequence,
    pub trace: EntropyTrace,
    pub step_logits: Vec<Vec<f64>>,
}

/// Decodes degradation levels, caption and a `rows × cols` HQ grid after `prefix`.
pub fn generate(
    p: &ModelParams,
    v: &Vocabulary,
    prefix: &TokenSequence,
    grid: (usize, usize),
    layout: SequenceLayout,
    sc: &SamplerConfig,
) -> Result<Generation> {
    generate_with(p, v, prefix, grid, layout, sc, GenerateOptions::default())
}

struct Decoder<'a> {
    p: &'a ModelParams,
    seq: TokenSequence,
    cond: Stream,
    next: Vec<f64>,
    keep: bool,
    step_logits: Vec<Vec<f64>>,
    max_len: usize,
}

impl Decoder<'_> {
    fn push(&mut self, id: usize, seg: Segment) -> Result<()> {
        if self.seq.len() >= self.max_len {
            return Err(Error::GenerationStuck(self.seq.len()));
        }
        self.seq.push(id, seg, true);
        self.next = self.cond.feed(self.p, &[id])?;
        Ok(())
    }

    fn record(&mut self) {
        if self.keep {
            self.step_logits.push(self.next.clone());
        }
    }
}

pub fn generate_with(
    p: &ModelParams,
    v: &Vocabulary,
    prefix: &TokenSequence,
    (rows, cols): (usize, usize),
    layout: SequenceLayout,
    sc: &SamplerConfig,
    opts: GenerateOptions,
) -> Result<Generation> {
    sc.validate()?;
    if v.size() != p.config().vocab_size {
        return Err(Error::ArtifactMismatch(format!(
            "vocabulary has {} tokens, model head has {}",
            v.size(),
            p.config().vocab_size
        )));
    }
    if prefix.ids.last() != Some(&Special::ImgEnd.id()) {
        return Err(Error::Malformed("prefix must end with <img_end>".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut cond = Stream::new(p, !opts.reforward);
    let next = cond.feed(p, &prefix.ids)?;
    let mut d = Decoder {
        p,
        seq: prefix.clone(),
        cond,
        next,
        keep: opts.keep_logits,
        step_logits: Vec::new(),
        max_len: p.config().max_seq_len,
    };
    let text_pick = |logits: &[f64], allowed: &[usize], rng: &mut ChaCha8Rng| {
        sample_token(logits, sc.text_top_k, sc.temperature, rng, allowed)
    };

    if layout.degradation {
        d.push(Special::DegStart.id(), Segment::Structural)?;
        for make in [Special::Noise as fn(Level) -> Special, Special::Blur] {
            let allowed: Vec<usize> = Level::ALL.iter().map(|&l| make(l).id()).collect();
            d.record();
            let id = text_pick(&d.next, &allowed, &mut rng)?;
            d.push(id, Segment::Degradation)?;
        }
        d.push(Special::DegEnd.id(), Segment::Structural)?;
    }
    if layout.caption {
        d.push(Special::CapStart.id(), Segment::Structural)?;
        let mut allowed: Vec<usize> = v.word_range().collect();
        allowed.push(Special::CapEnd.id());
        let mut words = 0;
        loop {
            if words == MAX_CAPTION_WORDS {
                d.push(Special::CapEnd.id(), Segment::Structural)?;
                break;
            }
            d.record();
            let id = text_pick(&d.next, &allowed, &mut rng)?;
            if id == Special::CapEnd.id() {
                d.push(id, Segment::Structural)?;
                break;
            }
            d.push(id, Segment::Caption)?;
            words += 1;
        }
    }

    d.push(Special::ImgStart.id(), Segment::Structural)?;
    let image_ids: Vec<usize> = v.image_range().collect();
    let offset = v.image_offset();
    let k_max = sc.k_max.min(image_ids.len());
    let k_min = sc.k_min.min(k_max);
    let guided = sc.guidance_weight != 0.0;
    let mut uncond = Stream::new(p, !opts.reforward);
    let mut uncond_next = if guided { uncond.feed(p, &uncond_prefix().ids)? } else { Vec::new() };
    let mut trace = EntropyTrace::default();
    for position in 0..rows * cols {
        d.record();
        let cond_img = &d.next[offset..offset + image_ids.len()];
        let g = if guided {
            apply_guidance(cond_img, &uncond_next[offset..offset + image_ids.len()], sc.guidance_weight)?
        } else {
            cond_img.to_vec()
        };
        let h = entropy(&tempered_probs(&g, sc.temperature))?;
        let k = match sc.strategy {
            Strategy::Dynamic => dynamic_k(h, k_min, k_max, sc.mu),
            Strategy::FixedTopK(k) => k.min(image_ids.len()),
        };
        let local: Vec<usize> = (0..g.len()).collect();
        let code = sample_token(&g, k, sc.temperature, &mut rng, &local)?;
        let id = offset + code;
        trace.entries.push(TraceEntry { position, entropy: h, k, id });
        d.push(id, Segment::HqImage)?;
        if guided && position + 1 < rows * cols {
            uncond_next = uncond.feed(p, &[id])?;
        }
    }
    // the closing tokens are forced; only their bookkeeping is needed
    for s in [Special::ImgEnd, Special::Eos] {
        if d.seq.len() >= d.max_len {
            return Err(Error::GenerationStuck(d.seq.len()));
        }
        d.seq.push(s.id(), Segment::Structural, true);
    }
    Ok(Generation { sequence: d.seq, trace, step_logits: d.step_logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        for n in [2usize, 10, 628] {
            let u = vec![1.0 / n as f64; n];
            assert!((entropy(&u).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn dynamic_k_examples() {
        assert_eq!(dynamic_k(5.0, 1, 2000, 5.0), 1000);
        assert_eq!(dynamic_k(45.0, 1, 2000, 5.0), 2000);
        assert_eq!(dynamic_k(0.0, 1, 2000, 5.0), 14);
        assert_eq!(dynamic_k(1e9, 1, 512, 5.0), 512);
    }

    #[test]
    fn guidance_identities() {
        let c = [1.0, -2.0, 0.5];
        let u = [0.3, 0.1, 0.5];
        assert_eq!(apply_guidance(&c, &u, 0.0).unwrap(), c.to_vec());
        assert_eq!(apply_guidance(&c, &c, 0.8).unwrap(), c.to_vec());
        assert!(apply_guidance(&c, &u[..2], 0.8).is_err());
    }

    #[test]
    fn top1_is_argmax_of_allowed() {
        let logits = [0.1, 5.0, 2.0, 3.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&logits, 1, 0.9, &mut rng, &[0, 2, 3, 4]).unwrap(), 3);
        assert_eq!(sample_token(&logits, 1, 0.9, &mut rng, &[0, 1]).unwrap(), 1);
        assert!(sample_token(&logits, 1, 0.9, &mut rng, &[]).is_err());
    }

    #[test]
    fn heatmap_conventions() {
        let mk = |h: &[f64]| EntropyTrace {
            entries: h.iter().enumerate().map(|(i, &e)| TraceEntry { position: i, entropy: e, k: 1, id: 0 }).collect(),
        };
        let flat = entropy_heatmap(&mk(&[2.0; 4]), 2, 2, 3).unwrap();
        assert_eq!(flat.shape(), (6, 6, 1));
        assert!(flat.data().iter().all(|&x| x == 0.5));
        let m = entropy_heatmap(&mk(&[0.0, 1.0, 4.0, 2.0]), 2, 2, 2).unwrap();
        assert_eq!(m.get(2, 0, 0), 0.0);
        assert_eq!(m.get(3, 1, 0), 0.0);
        assert_eq!(m.get(0, 0, 0), 1.0);
        assert!(entropy_heatmap(&mk(&[1.0; 3]), 2, 2, 1).is_err());
    }
}
