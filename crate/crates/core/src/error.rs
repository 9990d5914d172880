use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("already luma: image has a single channel")]
    AlreadyLuma,

    #[error("image {h}x{w} is smaller than the {window}x{window} SSIM window")]
    TooSmallForWindow { h: usize, w: usize, window: usize },

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(u8),

    #[error("unsupported color type: {0}")]
    UnsupportedColorType(String),

    #[error("not enough patches: need at least {needed}, found {found}")]
    NotEnoughPatches { needed: usize, found: usize },

    #[error("token id {id} out of range (limit {limit})")]
    TokenOutOfRange { id: usize, limit: usize },

    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),

    #[error("duplicate word in vocabulary: {0:?}")]
    DuplicateWord(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("generation exceeded max length {0} before completing")]
    GenerationStuck(usize),

    #[error("malformed sequence: {0}")]
    Malformed(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
