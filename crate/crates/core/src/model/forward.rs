use super::linalg::{
    add_assign, gemm, matmul, matmul_nt, matmul_tn_acc, rmsnorm, rmsnorm_backward, silu, silu_grad,
    softmax_in_place,
};
use super::params::{slot, split_mut, ModelParams, PER_LAYER};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::vocab::TokenSequence;

/// Cosine/sine tables: `[pos * half + i]` for rotation pair `i`.
struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    fn new(cfg: &ModelConfig, positions: std::ops::Range<usize>) -> Self {
        let hd = cfg.head_dim();
        let half = hd / 2;
        let n = positions.len();
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for p in positions {
            for i in 0..half {
                let theta = rope_angle(p, i, hd, cfg.rope_base);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head vector at table row `row`; `inverse` applies the transpose.
    fn apply(&self, v: &mut [f64], row: usize, inverse: bool) {
        for i in 0..self.half {
            let (c, mut s) = (self.cos[row * self.half + i], self.sin[row * self.half + i]);
            if inverse {
                s = -s;
            }
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }
}

fn rope_angle(pos: usize, pair: usize, hd: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-2.0 * pair as f64 / hd as f64)
}

/// Rotates an even-length head vector to position `pos`.
pub fn apply_rope(v: &mut [f64], pos: usize, base: f64) {
    let hd = v.len();
    for i in 0..hd / 2 {
        let (s, c) = rope_angle(pos, i, hd, base).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Per-head RMS normalisation with a shared per-dimension gain, in place.
/// Returns `1/rms` per (row, head).
fn head_norm(x: &mut [f64], rows: usize, heads: usize, hd: usize, gain: &[f64], eps: f64) -> Vec<f64> {
    let mut inv = vec![0.0; rows * heads];
    for (idx, chunk) in x.chunks_exact_mut(hd).enumerate().take(rows * heads) {
        let ms = chunk.iter().map(|v| v * v).sum::<f64>() / hd as f64;
        let s = 1.0 / (ms + eps).sqrt();
        inv[idx] = s;
        for (v, g) in chunk.iter_mut().zip(gain) {
            *v *= s * g;
        }
    }
    inv
}

struct LayerActs {
    x_in: Vec<f64>,
    attn_inv: Vec<f64>,
    a: Vec<f64>,
    q_raw: Vec<f64>,
    k_raw: Vec<f64>,
    q_inv: Vec<f64>,
    k_inv: Vec<f64>,
    q_rot: Vec<f64>,
    k_rot: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    ffn_inv: Vec<f64>,
    b: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
}

struct Acts {
    layers: Vec<LayerActs>,
    x_final: Vec<f64>,
    final_inv: Vec<f64>,
    z: Vec<f64>,
    logits: Vec<f64>,
}

fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_seq_len });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, limit: cfg.vocab_size });
    }
    Ok(())
}

fn forward_acts(p: &ModelParams, ids: &[usize]) -> Result<Acts> {
    let cfg = p.config();
    check_ids(cfg, ids)?;
    let (t_len, d, h, hd, f) = (ids.len(), cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden_dim());
    let rope = Rope::new(cfg, 0..t_len);
    let scale = 1.0 / (hd as f64).sqrt();
    let embed = p.embed();
    let mut x = Vec::with_capacity(t_len * d);
    for &id in ids {
        x.extend_from_slice(&embed[id * d..(id + 1) * d]);
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let w = |s| p.layer_slot(l, s);
        let (a, attn_inv) = rmsnorm(&x, t_len, d, w(slot::ATTN_NORM), cfg.norm_eps);
        let q_raw = matmul(&a, t_len, d, w(slot::WQ), d);
        let k_raw = matmul(&a, t_len, d, w(slot::WK), d);
        let v = matmul(&a, t_len, d, w(slot::WV), d);
        let mut q_rot = q_raw.clone();
        let mut k_rot = k_raw.clone();
        let q_inv = head_norm(&mut q_rot, t_len, h, hd, w(slot::Q_NORM), cfg.norm_eps);
        let k_inv = head_norm(&mut k_rot, t_len, h, hd, w(slot::K_NORM), cfg.norm_eps);
        for t in 0..t_len {
            for hh in 0..h {
                let r = t * d + hh * hd..t * d + (hh + 1) * hd;
                rope.apply(&mut q_rot[r.clone()], t, false);
                rope.apply(&mut k_rot[r], t, false);
            }
        }
        let mut probs = vec![0.0; h * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for hh in 0..h {
            let pm = &mut probs[hh * t_len * t_len..(hh + 1) * t_len * t_len];
            gemm(t_len, hd, t_len, &q_rot[hh * hd..], (d, 1), &k_rot[hh * hd..], (1, d), 0.0, pm, (t_len, 1));
            for i in 0..t_len {
                let row = &mut pm[i * t_len..(i + 1) * t_len];
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            gemm(t_len, t_len, hd, pm, (t_len, 1), &v[hh * hd..], (d, 1), 0.0, &mut o[hh * hd..], (d, 1));
        }
        let attn_out = matmul(&o, t_len, d, w(slot::WO), d);
        let mut x_mid = x.clone();
        add_assign(&mut x_mid, &attn_out);
        let (b, ffn_inv) = rmsnorm(&x_mid, t_len, d, w(slot::FFN_NORM), cfg.norm_eps);
        let gate = matmul(&b, t_len, d, w(slot::W_GATE), f);
        let up = matmul(&b, t_len, d, w(slot::W_UP), f);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let ffn_out = matmul(&act, t_len, f, w(slot::W_DOWN), d);
        let mut x_out = x_mid.clone();
        add_assign(&mut x_out, &ffn_out);
        layers.push(LayerActs {
            x_in: std::mem::replace(&mut x, x_out),
            attn_inv,
            a,
            q_raw,
            k_raw,
            q_inv,
            k_inv,
            q_rot,
            k_rot,
            v,
            probs,
            o,
            x_mid,
            ffn_inv,
            b,
            gate,
            up,
            act,
        });
    }
    let (z, final_inv) = rmsnorm(&x, t_len, d, p.final_norm(), cfg.norm_eps);
    let logits = matmul(&z, t_len, d, p.head(), cfg.vocab_size);
    Ok(Acts { layers, x_final: x, final_inv, z, logits })
}

/// Full-sequence logits, `ids.len() × vocab_size`, row-major.
pub fn forward(p: &ModelParams, ids: &[usize]) -> Result<Vec<f64>> {
    Ok(forward_acts(p, ids)?.logits)
}

fn check_mask(ids: &[usize], mask: &[bool]) -> Result<usize> {
    if mask.len() != ids.len() {
        return Err(Error::Shape(format!("mask length {} vs {} ids", mask.len(), ids.len())));
    }
    Ok(mask.iter().skip(1).filter(|&&m| m).count())
}

/// Mean next-token cross-entropy over supervised targets: position `t`
/// predicts `ids[t + 1]`, counted when `mask[t + 1]`.
pub fn loss(logits: &[f64], ids: &[usize], mask: &[bool], vocab: usize) -> Result<f64> {
    let n = check_mask(ids, mask)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    if logits.len() != ids.len() * vocab {
        return Err(Error::Shape(format!("{} logits for {} positions", logits.len(), ids.len())));
    }
    let mut total = 0.0;
    for t in 0..ids.len() - 1 {
        if mask[t + 1] {
            total += nll(&logits[t * vocab..(t + 1) * vocab], ids[t + 1]);
        }
    }
    Ok(total / n as f64)
}

fn nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Accumulates `scale · ∂(sum of supervised NLL)/∂θ` into `grad`; returns the NLL sum.
fn accumulate(p: &ModelParams, ids: &[usize], mask: &[bool], scale: f64, grad: &mut [f64]) -> Result<f64> {
    check_mask(ids, mask)?;
    let cfg = p.config();
    let acts = forward_acts(p, ids)?;
    let (t_len, d, h, hd, f, vsz) =
        (ids.len(), cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden_dim(), cfg.vocab_size);
    let rope = Rope::new(cfg, 0..t_len);
    let att_scale = 1.0 / (hd as f64).sqrt();

    let mut dlogits = vec![0.0; t_len * vsz];
    let mut total = 0.0;
    for t in 0..t_len - 1 {
        if !mask[t + 1] {
            continue;
        }
        let row = &mut dlogits[t * vsz..(t + 1) * vsz];
        row.copy_from_slice(&acts.logits[t * vsz..(t + 1) * vsz]);
        total += nll(row, ids[t + 1]);
        softmax_in_place(row);
        row[ids[t + 1]] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let mut g = split_mut(grad, p.tensors());
    let n_t = g.len();
    matmul_tn_acc(&acts.z, t_len, d, &dlogits, vsz, g[n_t - 1]);
    let dz = matmul_nt(&dlogits, t_len, vsz, p.head(), d);
    let mut dx = rmsnorm_backward(&acts.x_final, &acts.final_inv, t_len, d, p.final_norm(), &dz, g[n_t - 2]);

    for l in (0..cfg.layers).rev() {
        let la = &acts.layers[l];
        let w = |s| p.layer_slot(l, s);
        let gi = |s: usize| 1 + l * PER_LAYER + s;

        // feed-forward
        matmul_tn_acc(&la.act, t_len, f, &dx, d, g[gi(slot::W_DOWN)]);
        let dact = matmul_nt(&dx, t_len, d, w(slot::W_DOWN), f);
        let mut dgate = vec![0.0; t_len * f];
        let mut dup = vec![0.0; t_len * f];
        for i in 0..t_len * f {
            dgate[i] = dact[i] * la.up[i] * silu_grad(la.gate[i]);
            dup[i] = dact[i] * silu(la.gate[i]);
        }
        matmul_tn_acc(&la.b, t_len, d, &dgate, f, g[gi(slot::W_GATE)]);
        matmul_tn_acc(&la.b, t_len, d, &dup, f, g[gi(slot::W_UP)]);
        let mut db = matmul_nt(&dgate, t_len, f, w(slot::W_GATE), d);
        add_assign(&mut db, &matmul_nt(&dup, t_len, f, w(slot::W_UP), d));
        let dmid = rmsnorm_backward(&la.x_mid, &la.ffn_inv, t_len, d, w(slot::FFN_NORM), &db, g[gi(slot::FFN_NORM)]);
        add_assign(&mut dx, &dmid);

        // attention
        matmul_tn_acc(&la.o, t_len, d, &dx, d, g[gi(slot::WO)]);
        let d_o = matmul_nt(&dx, t_len, d, w(slot::WO), d);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len * t_len];
        for hh in 0..h {
            let pm = &la.probs[hh * t_len * t_len..(hh + 1) * t_len * t_len];
            gemm(t_len, hd, t_len, &d_o[hh * hd..], (d, 1), &la.v[hh * hd..], (1, d), 0.0, &mut dp, (t_len, 1));
            gemm(t_len, t_len, hd, pm, (1, t_len), &d_o[hh * hd..], (d, 1), 0.0, &mut dv[hh * hd..], (d, 1));
            for i in 0..t_len {
                let prow = &pm[i * t_len..=i * t_len + i];
                let drow = &mut dp[i * t_len..(i + 1) * t_len];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * att_scale;
                }
                drow[i + 1..].fill(0.0);
            }
            gemm(t_len, t_len, hd, &dp, (t_len, 1), &la.k_rot[hh * hd..], (d, 1), 0.0, &mut dq[hh * hd..], (d, 1));
            gemm(t_len, t_len, hd, &dp, (1, t_len), &la.q_rot[hh * hd..], (d, 1), 0.0, &mut dk[hh * hd..], (d, 1));
        }
        // undo rope, then per-head norm backward
        for (dbuf, raw, inv, gain_slot) in
            [(&mut dq, &la.q_raw, &la.q_inv, slot::Q_NORM), (&mut dk, &la.k_raw, &la.k_inv, slot::K_NORM)]
        {
            for t in 0..t_len {
                for hh in 0..h {
                    rope.apply(&mut dbuf[t * d + hh * hd..t * d + (hh + 1) * hd], t, true);
                }
            }
            let dn = rmsnorm_backward(raw, inv, t_len * h, hd, w(gain_slot), dbuf, g[gi(gain_slot)]);
            dbuf.copy_from_slice(&dn);
        }
        matmul_tn_acc(&la.a, t_len, d, &dq, d, g[gi(slot::WQ)]);
        matmul_tn_acc(&la.a, t_len, d, &dk, d, g[gi(slot::WK)]);
        matmul_tn_acc(&la.a, t_len, d, &dv, d, g[gi(slot::WV)]);
        let mut da = matmul_nt(&dq, t_len, d, w(slot::WQ), d);
        add_assign(&mut da, &matmul_nt(&dk, t_len, d, w(slot::WK), d));
        add_assign(&mut da, &matmul_nt(&dv, t_len, d, w(slot::WV), d));
        let din = rmsnorm_backward(&la.x_in, &la.attn_inv, t_len, d, w(slot::ATTN_NORM), &da, g[gi(slot::ATTN_NORM)]);
        add_assign(&mut dx, &din);
    }
    let gemb = &mut g[0];
    for (t, &id) in ids.iter().enumerate() {
        add_assign(&mut gemb[id * d..(id + 1) * d], &dx[t * d..(t + 1) * d]);
    }
    Ok(total)
}

fn check_finite(p: &ModelParams, grad: &[f64]) -> Result<()> {
    for t in p.tensors() {
        if grad[t.range()].iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    Ok(())
}

/// Mean supervised cross-entropy over every target in the batch and its exact
/// gradient (same layout as the parameters).
pub fn backward(p: &ModelParams, batch: &[&TokenSequence]) -> Result<(f64, Vec<f64>)> {
    let mut count = 0;
    for s in batch {
        count += check_mask(&s.ids, &s.loss_mask)?;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    for s in batch {
        total += accumulate(p, &s.ids, &s.loss_mask, scale, &mut grad)?;
    }
    check_finite(p, &grad)?;
    Ok((total * scale, grad))
}

pub fn loss_and_grad(p: &ModelParams, seq: &TokenSequence) -> Result<(f64, Vec<f64>)> {
    backward(p, &[seq])
}

/// Keys (after QK-Norm and RoPE) and values of every processed position, for
/// one-token-at-a-time decoding.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { keys: vec![Vec::new(); cfg.layers], values: vec![Vec::new(); cfg.layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds `ids` in order and returns the logits after the last one.
    pub fn extend(&mut self, p: &ModelParams, ids: &[usize]) -> Result<Vec<f64>> {
        let mut last = Err(Error::InvalidInput("no ids to feed".into()));
        for &id in ids {
            last = Ok(self.step(p, id)?);
        }
        last
    }

    /// Appends one token and returns its next-token logits.
    pub fn step(&mut self, p: &ModelParams, id: usize) -> Result<Vec<f64>> {
        let cfg = p.config();
        if self.len >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.len + 1, max: cfg.max_seq_len });
        }
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id, limit: cfg.vocab_size });
        }
        if self.keys.len() != cfg.layers {
            return Err(Error::Shape("cache built for a different layer count".into()));
        }
        let (d, h, hd, f) = (cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden_dim());
        let pos = self.len;
        let n = pos + 1;
        let rope = Rope::new(cfg, pos..pos + 1);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = p.embed()[id * d..(id + 1) * d].to_vec();
        for l in 0..cfg.layers {
            let w = |s| p.layer_slot(l, s);
            let (a, _) = rmsnorm(&x, 1, d, w(slot::ATTN_NORM), cfg.norm_eps);
            let mut q = matmul(&a, 1, d, w(slot::WQ), d);
            let mut k = matmul(&a, 1, d, w(slot::WK), d);
            let v = matmul(&a, 1, d, w(slot::WV), d);
            head_norm(&mut q, 1, h, hd, w(slot::Q_NORM), cfg.norm_eps);
            head_norm(&mut k, 1, h, hd, w(slot::K_NORM), cfg.norm_eps);
            for hh in 0..h {
                rope.apply(&mut q[hh * hd..(hh + 1) * hd], 0, false);
                rope.apply(&mut k[hh * hd..(hh + 1) * hd], 0, false);
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut o = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hh in 0..h {
                let qh = &q[hh * hd..(hh + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + hh * hd..j * d + (hh + 1) * hd];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                let oh = &mut o[hh * hd..(hh + 1) * hd];
                for (j, &pj) in scores.iter().enumerate() {
                    let vj = &values[j * d + hh * hd..j * d + (hh + 1) * hd];
                    for (oo, vv) in oh.iter_mut().zip(vj) {
                        *oo += pj * vv;
                    }
                }
            }
            add_assign(&mut x, &matmul(&o, 1, d, w(slot::WO), d));
            let (b, _) = rmsnorm(&x, 1, d, w(slot::FFN_NORM), cfg.norm_eps);
            let gate = matmul(&b, 1, d, w(slot::W_GATE), f);
            let up = matmul(&b, 1, d, w(slot::W_UP), f);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            add_assign(&mut x, &matmul(&act, 1, f, w(slot::W_DOWN), d));
        }
        self.len = n;
        let (z, _) = rmsnorm(&x, 1, d, p.final_norm(), cfg.norm_eps);
        Ok(matmul(&z, 1, d, p.head(), cfg.vocab_size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> ModelParams {
        let cfg = ModelConfig { layers: 2, dim: 16, heads: 2, vocab_size: 23, max_seq_len: 32, ..Default::default() };
        let mut p = ModelParams::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        for x in p.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let cfg = ModelConfig { layers: 1, dim: 8, heads: 2, vocab_size: 10, ..Default::default() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let logits = forward(&p, &[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
        let l = loss(&logits, &[1, 2, 3], &[false, true, true], 10).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causality() {
        let p = tiny(1);
        let a = forward(&p, &[1, 5, 7, 2, 9, 4]).unwrap();
        let b = forward(&p, &[1, 5, 7, 3, 0, 22]).unwrap();
        assert_eq!(a[..3 * 23], b[..3 * 23]);
        assert_ne!(a[3 * 23..4 * 23], b[3 * 23..4 * 23]);
    }

    #[test]
    fn cache_matches_full_forward() {
        let p = tiny(2);
        let ids = [0, 4, 9, 13, 2, 2, 17, 21];
        let full = forward(&p, &ids).unwrap();
        let mut cache = KvCache::new(p.config());
        for (t, &id) in ids.iter().enumerate() {
            let step = cache.step(&p, id).unwrap();
            for (a, b) in step.iter().zip(&full[t * 23..(t + 1) * 23]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = tiny(3);
        assert!(matches!(forward(&p, &[1; 33]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(forward(&p, &[23]), Err(Error::TokenOutOfRange { .. })));
        let mut s = TokenSequence::default();
        s.ids = vec![1, 2];
        s.loss_mask = vec![true, false];
        s.segments = vec![crate::vocab::Segment::Structural; 2];
        assert!(matches!(backward(&p, &[&s]), Err(Error::EmptyMask)));
    }
}
