//! Character-level transformer encoder-decoder: parameters, loss, schedule,
//! optimizer, training step and checkpoints.

mod checkpoint;
pub mod config;
mod loss;
pub mod ops;
mod optim;
mod train;
pub mod transformer;

pub use checkpoint::{extend_embeddings, init_random, Checkpoint, InitPolicy, RngState, INIT_BOUND};
pub use config::{FreezeScope, Schedule, TrainConfig, TransformerShape};
pub use loss::{label_smoothed_loss, label_smoothed_rows};
pub use optim::{clip_global_norm, lr_at, Adam};
pub use train::{Batch, Logits, StepMetrics, TrainState};
pub use transformer::{DecoderState, EncodedSource, TensorInfo, TensorKind, TensorRef, Transformer};

use thiserror::Error;

use crate::codec::CodecError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("incompatible vocabulary: {0}")]
    IncompatibleVocab(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
