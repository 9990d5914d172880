//! Token-based image restoration with a decoder-only transformer.
//!
//! The crate covers the whole perceive → understand → restore loop at desk
//! scale: synthetic scenes and degradations, a patch k-means image
//! tokenizer, a unified text+image vocabulary, a small transformer trained
//! from scratch with exact gradients, and an entropy-adaptive Top-k sampler.

pub mod config;
pub mod degradation;
pub mod error;
pub mod imaging;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod scene;
pub mod vocab;
pub mod vq;

pub use error::{Error, Result};
pub use imaging::Image;
