use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

/// One named tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Matrices take weight decay; norm gains do not.
    pub decay: bool,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub(crate) const PER_LAYER: usize = 11;

/// Tensor order inside one layer.
pub(crate) mod slot {
    pub const ATTN_NORM: usize = 0;
    pub const WQ: usize = 1;
    pub const WK: usize = 2;
    pub const WV: usize = 3;
    pub const WO: usize = 4;
    pub const Q_NORM: usize = 5;
    pub const K_NORM: usize = 6;
    pub const FFN_NORM: usize = 7;
    pub const W_GATE: usize = 8;
    pub const W_UP: usize = 9;
    pub const W_DOWN: usize = 10;
}

pub(crate) fn layout(cfg: &ModelConfig) -> Vec<TensorInfo> {
    let (d, v, f, hd) = (cfg.dim, cfg.vocab_size, cfg.hidden_dim(), cfg.head_dim());
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize, decay: bool| {
        out.push(TensorInfo { name, rows, cols, offset, decay });
        offset += rows * cols;
    };
    push("embed".into(), v, d, true);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        push(p("attn_norm"), 1, d, false);
        push(p("wq"), d, d, true);
        push(p("wk"), d, d, true);
        push(p("wv"), d, d, true);
        push(p("wo"), d, d, true);
        push(p("q_norm"), 1, hd, false);
        push(p("k_norm"), 1, hd, false);
        push(p("ffn_norm"), 1, d, false);
        push(p("w_gate"), d, f, true);
        push(p("w_up"), d, f, true);
        push(p("w_down"), f, d, true);
    }
    push("final_norm".into(), 1, d, false);
    push("head".into(), d, v, true);
    out
}

/// All weights in one flat buffer, addressed through a fixed named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    data: Vec<f64>,
}

impl ModelParams {
    /// Zero-mean normal (std 0.02) matrices, unit gains, zero output head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in &p.tensors {
            let slice = &mut p.data[t.range()];
            if t.name == "head" {
                continue;
            }
            if t.decay {
                for x in slice.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            } else {
                slice.fill(1.0);
            }
        }
        Ok(p)
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config);
        let total = tensors.last().map_or(0, |t| t.offset + t.len());
        Ok(Self { config: config.clone(), tensors, data: vec![0.0; total] })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub(crate) fn slice(&self, index: usize) -> &[f64] {
        &self.data[self.tensors[index].range()]
    }

    pub(crate) fn layer_slot(&self, layer: usize, slot: usize) -> &[f64] {
        self.slice(1 + layer * PER_LAYER + slot)
    }

    pub(crate) fn embed(&self) -> &[f64] {
        self.slice(0)
    }

    pub(crate) fn final_norm(&self) -> &[f64] {
        self.slice(self.tensors.len() - 2)
    }

    pub(crate) fn head(&self) -> &[f64] {
        self.slice(self.tensors.len() - 1)
    }

    /// Replaces all values; `values` must follow the layout order.
    pub fn set_data(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Shape(format!("{} values for {} parameters", values.len(), self.data.len())));
        }
        self.data = values;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Mutable per-tensor views into a gradient buffer laid out like the params.
pub(crate) fn split_mut<'a>(buf: &'a mut [f64], tensors: &[TensorInfo]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(tensors.len());
    let mut rest = buf;
    for t in tensors {
        let (head, tail) = rest.split_at_mut(t.len());
        out.push(head);
        rest = tail;
    }
    out
}
