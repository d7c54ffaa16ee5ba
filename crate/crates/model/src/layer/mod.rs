//! The HOT encoder block, patch embedding and task heads.

mod block;
mod config;
mod model;
mod params;

pub use block::{block_attention, hot_block_forward, rotary_encode, BlockWeights, HotBlock};
pub use config::{
    AttentionVariant, FeatureMapConfig, HOTBlockConfig, HeadConfig, HeadPooling, ModelConfig,
    NormPlacement, PatchEmbedConfig, RotaryConfig, Task,
};
pub use model::{patch_embed, HotModel, MANIFEST};
pub use params::{Bound, Params};

use hot_core::{AttentionError, IoError, TensorError};
use thiserror::Error;

use crate::tape::TapeError;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("manifest: {0}")]
    Json(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    File(#[from] std::io::Error),
}
