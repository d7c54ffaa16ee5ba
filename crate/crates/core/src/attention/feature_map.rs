//! Positive random features for the softmax kernel.
//!
//! `φ(x)_m = M^{-1/2} · exp(ω_m · x − ‖x‖²/2)` satisfies
//! `E_ω[φ(q)·φ(k)] = exp(q·k)` when each row `ω_m ~ N(0, I)`. Rows are drawn
//! in blocks of `D_H`, orthogonalised within each block by Gram–Schmidt and
//! rescaled to the norm of an independent Gaussian vector, which preserves
//! the marginal of every row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::AttentionError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMapSpec {
    pub num_features: usize,
    pub seed: u64,
    pub input_dim: usize,
    /// Block-orthogonal rows (default) or plain i.i.d. rows.
    pub orthogonal: bool,
}

impl FeatureMapSpec {
    pub fn new(num_features: usize, input_dim: usize, seed: u64) -> Self {
        FeatureMapSpec {
            num_features,
            seed,
            input_dim,
            orthogonal: true,
        }
    }
}

/// A drawn projection `ω` (`M × D_H`) together with its spec.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    spec: FeatureMapSpec,
    omega: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(spec: FeatureMapSpec) -> Result<Self, AttentionError> {
        if spec.num_features == 0 || spec.input_dim == 0 {
            return Err(AttentionError::DimMismatch(
                "feature count and input dimension must be at least 1".into(),
            ));
        }
        let (m, d) = (spec.num_features, spec.input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
        while rows.len() < m {
            let block: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| gauss()).collect()).collect();
            if !spec.orthogonal {
                rows.extend(block);
                continue;
            }
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
            for mut v in block {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
            for b in basis {
                let radius = (0..d).map(|_| gauss().powi(2)).sum::<f64>().sqrt();
                rows.push(b.into_iter().map(|x| x * radius).collect());
            }
        }
        rows.truncate(m);
        let data = rows.into_iter().flatten().map(T::of).collect();
        Ok(FeatureMap {
            spec,
            omega: Tensor::from_vec([m, d], data)?,
        })
    }

    pub fn spec(&self) -> &FeatureMapSpec {
        &self.spec
    }

    pub fn omega(&self) -> &Tensor<T> {
        &self.omega
    }

    pub fn num_features(&self) -> usize {
        self.spec.num_features
    }

    /// Feature vector of one input.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>, AttentionError> {
        let d = self.spec.input_dim;
        if x.len() != d {
            return Err(AttentionError::DimMismatch(format!(
                "feature map expects length {d}, got {}",
                x.len()
            )));
        }
        let m = self.spec.num_features;
        let norm_sq = x.iter().map(|&v| v * v).sum::<T>();
        let half = T::of(0.5);
        let c = T::one() / T::of(m as f64).sqrt();
        Ok(self
            .omega
            .data()
            .chunks(d)
            .map(|w| {
                let dot = w.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
                c * (dot - half * norm_sq).exp()
            })
            .collect())
    }

    /// Row-wise feature map of an `N × D_H` matrix, giving `N × M`.
    pub fn apply_rows(&self, x: &Tensor<T>) -> Result<Tensor<T>, AttentionError> {
        if x.order() != 2 {
            return Err(AttentionError::DimMismatch("apply_rows takes a matrix".into()));
        }
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.spec.num_features);
        for i in 0..n {
            data.extend(self.apply(x.row(i))?);
        }
        Ok(Tensor::from_vec([n, self.spec.num_features], data)?)
    }
}
