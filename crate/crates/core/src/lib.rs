//! Tensor algebra, Kronecker decompositions and high-order attention kernels.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! element type for the common cases. Verification code uses the `f64`
//! aliases.

pub mod attention;
pub mod error;
pub mod io;
pub mod kron;
pub mod linalg;
pub mod scalar;
pub mod tensor;

pub use error::{AttentionError, IoError, KronError, TensorError};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

/// Double-precision tensor, the type used on every verification path.
pub type DenseTensor = Tensor<f64>;
pub type DenseTensor32 = Tensor<f32>;
pub type KronFactors = kron::KronFactors<f64>;
pub type KronSum = kron::KronSum<f64>;
pub type AttentionWeights = attention::AttentionWeights<f64>;
pub type AttentionConfig = attention::AttentionConfig<f64>;
pub type FeatureMap = attention::FeatureMap<f64>;
