#![allow(dead_code)]

use arsr_core::model::{forward, loss, ModelConfig, ModelParams};
use arsr_core::vocab::{Segment, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random sequence with a random (non-empty) supervision mask.
pub fn random_sequence(len: usize, vocab: usize, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = TokenSequence::default();
    for t in 0..len {
        s.push(rng.random_range(0..vocab), Segment::Structural, t > 0 && rng.random_bool(0.7));
    }
    s.loss_mask[len - 1] = true;
    s
}

/// Default init plus a uniform jitter so the zero head does not hide the lower layers.
pub fn jittered_params(cfg: &ModelConfig, seed: u64, amp: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for x in p.data_mut() {
        *x += rng.random_range(-amp..amp);
    }
    p
}

pub fn seq_loss(p: &ModelParams, s: &TokenSequence) -> f64 {
    let logits = forward(p, &s.ids).unwrap();
    loss(&logits, &s.ids, &s.loss_mask, p.config().vocab_size).unwrap()
}

/// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the analytic
/// gradient and central differences, with the name of that tensor.
pub fn gradient_check(p: &ModelParams, s: &TokenSequence, analytic: &[f64], h: f64) -> Vec<(String, f64)> {
    let mut q = p.clone();
    let mut out = Vec::new();
    for t in p.tensors() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in t.range() {
            let orig = q.data()[i];
            q.data_mut()[i] = orig + h;
            let lp = seq_loss(&q, s);
            q.data_mut()[i] = orig - h;
            let lm = seq_loss(&q, s);
            q.data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            diff += (num - analytic[i]).powi(2);
            na += analytic[i].powi(2);
            nn += num * num;
        }
        let denom = na.sqrt().max(nn.sqrt());
        out.push((t.name.clone(), if denom == 0.0 { 0.0 } else { diff.sqrt() / denom }));
    }
    out
}
