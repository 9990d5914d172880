use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::backward;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::vocab::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Probability of swapping a sample for its unconditional form.
    pub uncond_prob: f64,
    /// Stop once the running batch loss falls below this value.
    pub target_loss: Option<f64>,
    /// Hard cap on optimizer steps (the schedule still spans all epochs).
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            warmup_fraction: 0.25,
            epochs: 2,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            uncond_prob: 0.1,
            target_loss: None,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid Adam constants");
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return bad("uncond_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        ((self.warmup_fraction * total as f64).round() as usize).max(1)
    }
}

/// Linear warmup from 0, then cosine decay reaching 0 at `total`.
pub fn lr_at(step: usize, total: usize, tc: &TrainConfig) -> f64 {
    let warm = tc.warmup_steps(total);
    if step < warm {
        return tc.learning_rate * step as f64 / warm as f64;
    }
    if total <= warm {
        return tc.learning_rate;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    tc.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with bias correction and decoupled, per-tensor masked weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(p: &ModelParams) -> Self {
        let mut decay_mask = vec![false; p.len()];
        for t in p.tensors() {
            decay_mask[t.range()].fill(t.decay);
        }
        Self { m: vec![0.0; p.len()], v: vec![0.0; p.len()], t: 0, decay_mask }
    }

    pub fn step(&mut self, p: &mut ModelParams, grad: &[f64], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = tc.beta1 * self.m[i] + (1.0 - tc.beta1) * g;
            self.v[i] = tc.beta2 * self.v[i] + (1.0 - tc.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + tc.eps);
            let decay = if self.decay_mask[i] { tc.weight_decay * *x } else { 0.0 };
            *x -= lr * (update + decay);
        }
    }
}

/// Scales `grad` in place so its global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub(crate) fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// A conditional training sequence paired with its unconditional form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub cond: TokenSequence,
    pub uncond: TokenSequence,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<LossRecord>,
    pub steps: usize,
    pub reached_target: bool,
}

/// Mini-batch AdamW training. Shuffle order, unconditional swaps and hence the
/// final parameters are fixed by `tc.seed`.
pub fn train(p: &mut ModelParams, data: &[TrainExample], tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let total = tc.total_steps(data.len());
    let limit = tc.max_steps.map_or(total, |m| m.min(total));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(p);
    let mut curve = Vec::with_capacity(limit);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    'outer: for _epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            if step >= limit {
                break 'outer;
            }
            let batch: Vec<&TokenSequence> = chunk
                .iter()
                .map(|&i| if rng.random::<f64>() < tc.uncond_prob { &data[i].uncond } else { &data[i].cond })
                .collect();
            let (loss, mut grad) = backward(p, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            clip_global_norm(&mut grad, tc.grad_clip);
            let lr = lr_at(step, total, tc);
            opt.step(p, &grad, lr, tc);
            curve.push(LossRecord { step, lr, loss });
            log::debug!("step {step} lr {lr:.3e} loss {loss:.5}");
            step += 1;
            if tc.target_loss.is_some_and(|t| loss < t) {
                return Ok(TrainOutcome { curve, steps: step, reached_target: true });
            }
        }
    }
    Ok(TrainOutcome { curve, steps: step, reached_target: false })
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,lr,loss")?;
    for r in curve {
        writeln!(f, "{},{:.6e},{:.6}", r.step, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}
