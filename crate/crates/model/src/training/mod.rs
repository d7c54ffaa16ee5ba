//! Optimiser, losses and metrics, gradient verification, synthetic tasks and
//! the training loop.

mod gradcheck;
mod metrics;
mod optim;
mod synthetic;
mod trainer;

pub use gradcheck::{finite_diff_check, run_grad_case, GradCase, GradCheckOptions, GradCheckReport, GradTarget};
pub use metrics::{accuracy, auc, auc_ovr, cross_entropy, mae, mse, smape, softmax_probs, SMAPE_EPS};
pub use optim::{adam_step, AdamConfig, OptimState};
pub use synthetic::{
    forecast_target, gen_synthetic, Dataset, ForecastCoefficients, Split, SyntheticTask, SyntheticTaskSpec, Targets,
};
pub use trainer::{
    evaluate, linear_readout_mse, loss_and_grads, metric, predict, train, LogRow, Metrics, Selection, TrainConfig,
    TrainReport,
};

use hot_core::TensorError;
use thiserror::Error;

use crate::layer::LayerError;
use crate::tape::TapeError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient {value} in {param}[{index}] at step {step}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
        step: u64,
    },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
