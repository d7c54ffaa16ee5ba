//! Full and Kronecker-factorized multihead attention, each with softmax or
//! random-feature (linear) weights.
//!
//! Projection orientation: every weight `W_Q`, `W_K`, `W_V` is `D × D_H` and
//! maps the hidden mode from `D` to `D_H`, i.e. `Q = X ×_last W_Qᵀ`; `W_O` is
//! `D_H × D`.

mod factorized;
mod feature_map;
mod standard;

pub use factorized::{
    factorized_attention_linear, factorized_attention_materialized, factorized_attention_softmax,
    full_attention_linear, head_factors, kernel_attention_matrix, kernelized_mode_apply,
    mode_attention_matrix, pooled, KernelOutput,
};
pub use feature_map::{FeatureMap, FeatureMapSpec};
pub use standard::{full_high_order_attention, softmax_rows, standard_attention};

use rand::Rng;

use crate::error::AttentionError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Projection matrices of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    heads: Vec<HeadWeights<T>>,
    d_model: usize,
    d_head: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(heads: Vec<HeadWeights<T>>) -> Result<Self, AttentionError> {
        let first = heads
            .first()
            .ok_or_else(|| AttentionError::InvalidWeights("no heads".into()))?;
        if first.w_q.order() != 2 {
            return Err(AttentionError::InvalidWeights("W_Q must be a matrix".into()));
        }
        let (d_model, d_head) = (first.w_q.rows(), first.w_q.cols());
        if d_model != heads.len() * d_head {
            return Err(AttentionError::InvalidWeights(format!(
                "D = {d_model} must equal heads ({}) × D_H ({d_head})",
                heads.len()
            )));
        }
        for (h, hw) in heads.iter().enumerate() {
            for (name, w, dims) in [
                ("W_Q", &hw.w_q, [d_model, d_head]),
                ("W_K", &hw.w_k, [d_model, d_head]),
                ("W_V", &hw.w_v, [d_model, d_head]),
                ("W_O", &hw.w_o, [d_head, d_model]),
            ] {
                if w.dims() != dims {
                    return Err(AttentionError::InvalidWeights(format!(
                        "head {h} {name} has shape {}, expected {dims:?}",
                        w.shape()
                    )));
                }
            }
        }
        Ok(AttentionWeights {
            heads,
            d_model,
            d_head,
        })
    }

    /// Glorot-uniform initialisation with `d_model / n_heads` per head.
    pub fn glorot<R: Rng + ?Sized>(
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self, AttentionError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(AttentionError::InvalidWeights(format!(
                "D = {d_model} not divisible by {n_heads} heads"
            )));
        }
        let d_head = d_model / n_heads;
        let a = (6.0 / (d_model + d_head) as f64).sqrt();
        let mut draw = |rows, cols| Tensor::random_uniform([rows, cols], -a, a, rng);
        let heads = (0..n_heads)
            .map(|_| {
                Ok(HeadWeights {
                    w_q: draw(d_model, d_head)?,
                    w_k: draw(d_model, d_head)?,
                    w_v: draw(d_model, d_head)?,
                    w_o: draw(d_head, d_model)?,
                })
            })
            .collect::<Result<Vec<_>, AttentionError>>()?;
        Self::new(heads)
    }

    pub fn heads(&self) -> &[HeadWeights<T>] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn param_count(&self) -> usize {
        4 * self.heads.len() * self.d_model * self.d_head
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Pooling {
    /// Sum over the pooled positions.
    #[default]
    Sum,
    /// Sum divided by the number of pooled positions.
    Mean,
}

/// Knobs shared by every attention variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig<T> {
    pub pooling: Pooling,
    /// Score scale; `None` means `1/√D_H`.
    pub score_scale: Option<T>,
    /// Floor applied to the kernel normaliser entries.
    pub z_floor: T,
    /// Largest token count the quadratic oracle accepts.
    pub oracle_cap: usize,
    /// Positional modes that attend; `None` means all. Disabled modes use an
    /// identity factor.
    pub mode_mask: Option<Vec<bool>>,
}

impl<T: Scalar> Default for AttentionConfig<T> {
    fn default() -> Self {
        AttentionConfig {
            pooling: Pooling::Sum,
            score_scale: None,
            z_floor: T::of(1e-6),
            oracle_cap: 4096,
            mode_mask: None,
        }
    }
}

impl<T: Scalar> AttentionConfig<T> {
    pub fn scale_for(&self, d_head: usize) -> T {
        self.score_scale
            .unwrap_or_else(|| T::one() / T::of(d_head as f64).sqrt())
    }

    pub(crate) fn mode_enabled(&self, mode: usize) -> bool {
        self.mode_mask
            .as_ref()
            .map_or(true, |m| m.get(mode).copied().unwrap_or(false))
    }
}

/// Contracts the last mode of `x` with `w` (`D_in × D_out`).
pub fn project_last<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>, AttentionError> {
    let last = x.order() - 1;
    if w.order() != 2 || w.rows() != x.dims()[last] {
        return Err(AttentionError::DimMismatch(format!(
            "hidden size {} against projection {}",
            x.dims()[last],
            w.shape()
        )));
    }
    Ok(x.mode_product(&w.transpose()?, last)?)
}

pub(crate) fn check_input<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(), AttentionError> {
    if x.order() < 2 {
        return Err(AttentionError::DimMismatch(
            "input needs at least one positional mode and a hidden mode".into(),
        ));
    }
    let d = x.dims()[x.order() - 1];
    if d != w.d_model() {
        return Err(AttentionError::DimMismatch(format!(
            "input hidden size {d} but weights expect {}",
            w.d_model()
        )));
    }
    Ok(())
}
