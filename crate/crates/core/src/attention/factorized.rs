//! Kronecker-factorized attention: one `N_i × N_i` attention matrix per
//! positional mode and head, applied by successive mode products.

use crate::attention::standard::{project_head, softmax_rows};
use crate::attention::{
    check_input, project_last, AttentionConfig, AttentionWeights, FeatureMap, Pooling,
};
use crate::error::AttentionError;
use crate::kron::{apply_factors, KronFactors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pooled `N_mode × D_H` matrix of a projected query or key tensor.
pub fn pooled<T: Scalar>(
    t: &Tensor<T>,
    mode: usize,
    pooling: Pooling,
) -> Result<Tensor<T>, AttentionError> {
    let p = t.pool_sum_except(mode)?;
    Ok(match pooling {
        Pooling::Sum => p,
        Pooling::Mean => {
            let count = t.numel() / p.numel();
            p.scale(T::one() / T::of(count as f64))
        }
    })
}

/// Row-stochastic attention matrix of one positional mode:
/// `softmax(pool(Q) · pool(K)ᵀ · scale)`.
pub fn mode_attention_matrix<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    mode: usize,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    if q.dims() != k.dims() {
        return Err(AttentionError::DimMismatch(format!(
            "query {} vs key {}",
            q.shape(),
            k.shape()
        )));
    }
    let d_head = q.dims()[q.order() - 1];
    let qt = pooled(q, mode, cfg.pooling)?;
    let kt = pooled(k, mode, cfg.pooling)?;
    let scores = qt.matmul(&kt.transpose()?)?.scale(cfg.scale_for(d_head));
    softmax_rows(&scores)
}

/// The Kronecker factors (one per positional mode) of head `h`. Masked-off
/// modes get identity factors.
pub fn head_factors<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    h: usize,
    cfg: &AttentionConfig<T>,
) -> Result<KronFactors<T>, AttentionError> {
    check_input(x, w)?;
    let [q, k, _] = project_head(x, &w.heads()[h])?;
    factors_from_qk(&q, &k, cfg)
}

fn factors_from_qk<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig<T>,
) -> Result<KronFactors<T>, AttentionError> {
    let positional = q.order() - 1;
    let factors = (0..positional)
        .map(|mode| {
            if cfg.mode_enabled(mode) {
                mode_attention_matrix(q, k, mode, cfg)
            } else {
                Ok(Tensor::identity(q.dims()[mode])?)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    KronFactors::new(factors).map_err(|e| AttentionError::DimMismatch(e.to_string()))
}

/// Factorized softmax attention. Per head the factor matrices are applied to
/// the value tensor mode by mode; the full attention matrix is never formed.
pub fn factorized_attention_softmax<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    check_input(x, w)?;
    let mut out = Tensor::zeros(x.dims().to_vec())?;
    for head in w.heads() {
        let [q, k, v] = project_head(x, head)?;
        let factors = factors_from_qk(&q, &k, cfg)?;
        let p = apply_factors(&v, &factors).map_err(|e| AttentionError::DimMismatch(e.to_string()))?;
        out.add_assign(&project_last(&p, &head.w_o)?)?;
    }
    Ok(out)
}

/// Same result as [`factorized_attention_softmax`] computed through the
/// explicit `(∏N_i) × (∏N_i)` Kronecker matrix per head. Oracle for tests
/// and the equivalence suite.
pub fn factorized_attention_materialized<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    check_input(x, w)?;
    let last = x.order() - 1;
    let mut out = Tensor::zeros(x.dims().to_vec())?;
    for head in w.heads() {
        let [q, k, v] = project_head(x, head)?;
        let s = factors_from_qk(&q, &k, cfg)?
            .materialize()
            .map_err(|e| AttentionError::DimMismatch(e.to_string()))?;
        // (S · V_(last)ᵀ)ᵀ = V_(last) · Sᵀ
        let v_unf = v.matricize(last)?;
        let applied = v_unf.matmul(&s.transpose()?)?;
        let p = Tensor::fold(&applied, last, v.shape())?;
        out.add_assign(&project_last(&p, &head.w_o)?)?;
    }
    Ok(out)
}

/// Result of a kernelized application: output and the number of normaliser
/// entries that had to be raised to the floor.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelOutput<T> {
    pub output: Tensor<T>,
    pub floored: usize,
}

fn scaled_features<T: Scalar>(
    t: &Tensor<T>,
    fm: &FeatureMap<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    // φ(a)·φ(b) estimates exp(a·b); pre-scaling both sides by √scale
    // yields exp(q·k · scale)
    let d_head = t.dims()[t.order() - 1];
    let c = cfg.scale_for(d_head).sqrt();
    fm.apply_rows(&t.scale(c))
}

fn normaliser<T: Scalar>(phi_q: &Tensor<T>, phi_k: &Tensor<T>, floor: T) -> (Vec<T>, usize) {
    let m = phi_k.cols();
    let mut ksum = vec![T::zero(); m];
    for row in phi_k.data().chunks(m) {
        ksum.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
    }
    let mut floored = 0;
    let z = phi_q
        .data()
        .chunks(m)
        .map(|row| {
            let z: T = row.iter().zip(&ksum).map(|(&a, &b)| a * b).sum();
            if z < floor {
                floored += 1;
                floor
            } else {
                z
            }
        })
        .collect();
    (z, floored)
}

/// Implied `N × N` kernel attention matrix `Z⁻¹ φ(Q̃) φ(K̃)ᵀ`. Diagnostic and
/// test use; the apply path never forms it.
pub fn kernel_attention_matrix<T: Scalar>(
    qt: &Tensor<T>,
    kt: &Tensor<T>,
    fm: &FeatureMap<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    let phi_q = scaled_features(qt, fm, cfg)?;
    let phi_k = scaled_features(kt, fm, cfg)?;
    let (z, _) = normaliser(&phi_q, &phi_k, cfg.z_floor);
    let mut s = phi_q.matmul(&phi_k.transpose()?)?;
    let n = s.cols();
    for (row, &zi) in s.data_mut().chunks_mut(n).zip(&z) {
        row.iter_mut().for_each(|v| *v /= zi);
    }
    Ok(s)
}

/// `((V ×_mode φ(K̃)ᵀ) ×_mode φ(Q̃)) ×_mode Z⁻¹`, evaluated key side first so
/// the cost is linear in `N_mode`.
pub fn kernelized_mode_apply<T: Scalar>(
    v: &Tensor<T>,
    qt: &Tensor<T>,
    kt: &Tensor<T>,
    mode: usize,
    fm: &FeatureMap<T>,
    cfg: &AttentionConfig<T>,
) -> Result<KernelOutput<T>, AttentionError> {
    v.shape().check_mode(mode)?;
    let n = v.dims()[mode];
    if qt.order() != 2 || kt.order() != 2 || qt.rows() != n || kt.rows() != n {
        return Err(AttentionError::DimMismatch(format!(
            "pooled query {} / key {} against mode {mode} of size {n}",
            qt.shape(),
            kt.shape()
        )));
    }
    let phi_q = scaled_features(qt, fm, cfg)?;
    let phi_k = scaled_features(kt, fm, cfg)?;
    let (z, floored) = normaliser(&phi_q, &phi_k, cfg.z_floor);
    let mut out = v
        .mode_product(&phi_k.transpose()?, mode)?
        .mode_product(&phi_q, mode)?;
    let (outer, len, inner) = (
        v.dims()[..mode].iter().product::<usize>(),
        n,
        v.dims()[mode + 1..].iter().product::<usize>(),
    );
    let data = out.data_mut();
    for o in 0..outer {
        for (j, &zj) in z.iter().enumerate() {
            let start = (o * len + j) * inner;
            data[start..start + inner].iter_mut().for_each(|x| *x /= zj);
        }
    }
    Ok(KernelOutput {
        output: out,
        floored,
    })
}

/// Factorized attention with random-feature weights: per head, per enabled
/// mode, pool → feature map → kernelized apply, then the output projection.
pub fn factorized_attention_linear<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    fm: &FeatureMap<T>,
    cfg: &AttentionConfig<T>,
) -> Result<KernelOutput<T>, AttentionError> {
    check_input(x, w)?;
    if fm.spec().input_dim != w.d_head() {
        return Err(AttentionError::DimMismatch(format!(
            "feature map input dim {} but D_H = {}",
            fm.spec().input_dim,
            w.d_head()
        )));
    }
    let positional = x.order() - 1;
    let mut out = Tensor::zeros(x.dims().to_vec())?;
    let mut floored = 0;
    for head in w.heads() {
        let [q, k, v] = project_head(x, head)?;
        let mut p = v;
        for mode in 0..positional {
            if !cfg.mode_enabled(mode) {
                continue;
            }
            let qt = pooled(&q, mode, cfg.pooling)?;
            let kt = pooled(&k, mode, cfg.pooling)?;
            let applied = kernelized_mode_apply(&p, &qt, &kt, mode, fm, cfg)?;
            floored += applied.floored;
            p = applied.output;
        }
        out.add_assign(&project_last(&p, &head.w_o)?)?;
    }
    Ok(KernelOutput {
        output: out,
        floored,
    })
}

/// Random-feature attention over the flattened token list, without
/// factorization.
pub fn full_attention_linear<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    fm: &FeatureMap<T>,
    cfg: &AttentionConfig<T>,
) -> Result<KernelOutput<T>, AttentionError> {
    check_input(x, w)?;
    let d = w.d_model();
    let tokens = x.numel() / d;
    let flat_cfg = AttentionConfig {
        mode_mask: None,
        ..cfg.clone()
    };
    let res = factorized_attention_linear(&x.reshape([tokens, d])?, w, fm, &flat_cfg)?;
    Ok(KernelOutput {
        output: res.output.reshape(x.dims().to_vec())?,
        floored: res.floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{standard_attention, FeatureMapSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Tensor<f64>;

    #[test]
    fn single_mode_reduces_to_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = AttentionWeights::<f64>::glorot(6, 3, &mut rng).unwrap();
        let x = M::random_normal([5, 6], &mut rng).unwrap();
        let cfg = AttentionConfig::default();
        let a = factorized_attention_softmax(&x, &w, &cfg).unwrap();
        let b = standard_attention(&x, &w, &cfg).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn constant_queries_give_uniform_attention() {
        let q = M::full([3, 4, 2], 0.7).unwrap();
        let s = mode_attention_matrix(&q, &q, 1, &AttentionConfig::default()).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    /// Pools by explicit loops and applies softmax by hand.
    #[test]
    fn mode_matrix_matches_hand_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = M::random_normal([2, 3, 4], &mut rng).unwrap();
        let k = M::random_normal([2, 3, 4], &mut rng).unwrap();
        for mode in 0..2 {
            let n = q.dims()[mode];
            let pool = |t: &M| {
                let mut p = vec![vec![0.0; 4]; n];
                for a in 0..2 {
                    for b in 0..3 {
                        for d in 0..4 {
                            let i = if mode == 0 { a } else { b };
                            p[i][d] += t.get(&[a, b, d]);
                        }
                    }
                }
                p
            };
            let (qp, kp) = (pool(&q), pool(&k));
            let s = mode_attention_matrix(&q, &k, mode, &AttentionConfig::default()).unwrap();
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..4).map(|d| qp[i][d] * kp[j][d]).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..n {
                    assert!((s.get(&[i, j]) - logits[j].exp() / z).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn kernel_matrix_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = FeatureMap::new(FeatureMapSpec::new(32, 4, 5)).unwrap();
        let qt = M::random_normal([6, 4], &mut rng).unwrap();
        let kt = M::random_normal([6, 4], &mut rng).unwrap();
        let s = kernel_attention_matrix(&qt, &kt, &fm, &AttentionConfig::default()).unwrap();
        for i in 0..6 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_apply_matches_implied_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fm = FeatureMap::new(FeatureMapSpec::new(16, 4, 2)).unwrap();
        let v = M::random_normal([3, 5, 4], &mut rng).unwrap();
        let qt = M::random_normal([5, 4], &mut rng).unwrap();
        let kt = M::random_normal([5, 4], &mut rng).unwrap();
        let cfg = AttentionConfig::default();
        let got = kernelized_mode_apply(&v, &qt, &kt, 1, &fm, &cfg).unwrap();
        let s = kernel_attention_matrix(&qt, &kt, &fm, &cfg).unwrap();
        let expected = v.mode_product(&s, 1).unwrap();
        assert!(got.output.max_abs_diff(&expected).unwrap() < 1e-12);
        assert_eq!(got.floored, 0);
    }

    #[test]
    fn kernel_apply_single_position_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let fm = FeatureMap::new(FeatureMapSpec::new(8, 2, 1)).unwrap();
        let v = M::random_normal([1, 3, 2], &mut rng).unwrap();
        let qt = M::random_normal([1, 2], &mut rng).unwrap();
        let kt = M::random_normal([1, 2], &mut rng).unwrap();
        let out = kernelized_mode_apply(&v, &qt, &kt, 0, &fm, &AttentionConfig::default()).unwrap();
        assert!(out.output.max_abs_diff(&v).unwrap() < 1e-14);
    }

    #[test]
    fn floor_counts_degenerate_normaliser() {
        let fm = FeatureMap::new(FeatureMapSpec::new(4, 2, 1)).unwrap();
        let v = M::full([2, 2], 1.0).unwrap();
        // huge norm drives every feature to ~0
        let qt = M::full([2, 2], 60.0).unwrap();
        let kt = M::full([2, 2], -60.0).unwrap();
        let out = kernelized_mode_apply(&v, &qt, &kt, 0, &fm, &AttentionConfig::default()).unwrap();
        assert_eq!(out.floored, 2);
        assert!(out.output.is_finite());
    }

    #[test]
    fn linear_variants_agree_on_one_mode_and_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = AttentionWeights::<f64>::glorot(4, 2, &mut rng).unwrap();
        let fm = FeatureMap::new(FeatureMapSpec::new(16, 2, 4)).unwrap();
        let x = M::random_normal([7, 4], &mut rng).unwrap();
        let cfg = AttentionConfig::default();
        let a = factorized_attention_linear(&x, &w, &fm, &cfg).unwrap();
        let b = full_attention_linear(&x, &w, &fm, &cfg).unwrap();
        assert_eq!(a, b);
        let y = M::random_normal([2, 3, 4, 8], &mut rng).unwrap();
        let w8 = AttentionWeights::<f64>::glorot(8, 2, &mut rng).unwrap();
        let fm4 = FeatureMap::new(FeatureMapSpec::new(16, 4, 4)).unwrap();
        let r1 = factorized_attention_linear(&y, &w8, &fm4, &cfg).unwrap();
        let r2 = factorized_attention_linear(&y, &w8, &fm4, &cfg).unwrap();
        assert_eq!(r1.output.dims(), y.dims());
        assert!(r1
            .output
            .data()
            .iter()
            .zip(r2.output.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_wrong_hidden_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = AttentionWeights::<f64>::glorot(4, 2, &mut rng).unwrap();
        let x = M::zeros([2, 3, 5]).unwrap();
        assert!(factorized_attention_softmax(&x, &w, &AttentionConfig::default()).is_err());
    }
}
