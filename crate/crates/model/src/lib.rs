//! HOT encoder blocks, task heads and the training machinery around them.

pub mod layer;
pub mod tape;
pub mod training;

pub use layer::{HOTBlockConfig, HotModel, LayerError, ModelConfig};
pub use tape::{Gradients, Tape, TapeError, Var};
pub use training::TrainError;
