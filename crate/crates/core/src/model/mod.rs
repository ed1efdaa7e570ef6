//! The grid vision transformer: patch embedding, encoder, readout, checkpoints.

mod checkpoint;
mod config;
mod forward;
mod params;

use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use forward::{
    build_token_sequence, encoder_layer, forward_batch, forward_classify, forward_late_fusion,
    patchify, patchify_channels, register_params, unpatchify, Classification, EncoderVars,
    ForwardTrace, LayerOutput, Logits, ModelVars,
};
pub use params::{expected_shapes, EncoderParams, LayerParams, ModelParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version `{found}`")]
    Version { path: PathBuf, found: String },
    #[error("{path}: malformed checkpoint header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("tensor `{tensor}` has shape {found:?} but the config implies {expected:?}")]
    ShapeContradiction {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint payload is truncated inside tensor `{tensor}`")]
    Truncated { tensor: String },
    #[error("checkpoint is missing tensor `{tensor}`")]
    MissingTensor { tensor: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
