use crate::attention::{check_input, project_last, AttentionConfig, AttentionWeights};
use crate::error::AttentionError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>, AttentionError> {
    if m.order() != 2 {
        return Err(AttentionError::DimMismatch("softmax_rows takes a matrix".into()));
    }
    let cols = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Multihead scaled dot-product attention over an `N × D` token matrix.
pub fn standard_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    if x.order() != 2 {
        return Err(AttentionError::DimMismatch("standard attention takes N × D".into()));
    }
    check_input(x, w)?;
    let scale = cfg.scale_for(w.d_head());
    let mut out = Tensor::zeros(x.dims().to_vec())?;
    for head in w.heads() {
        let q = x.matmul(&head.w_q)?;
        let k = x.matmul(&head.w_k)?;
        let v = x.matmul(&head.w_v)?;
        let scores = q.matmul(&k.transpose()?)?.scale(scale);
        let s = softmax_rows(&scores)?;
        out.add_assign(&s.matmul(&v)?.matmul(&head.w_o)?)?;
    }
    Ok(out)
}

/// Exact high-order attention: every positional index is one token, so the
/// attention matrix is `(∏N_i) × (∏N_i)`. Refuses inputs above the oracle cap.
pub fn full_high_order_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>, AttentionError> {
    check_input(x, w)?;
    let d = w.d_model();
    let tokens = x.numel() / d;
    if tokens > cfg.oracle_cap {
        return Err(AttentionError::OracleCap {
            tokens,
            cap: cfg.oracle_cap,
        });
    }
    let flat = x.reshape([tokens, d])?;
    Ok(standard_attention(&flat, w, cfg)?.reshape(x.dims().to_vec())?)
}

/// Shared by the factorized path: projections of one head.
pub(crate) fn project_head<T: Scalar>(
    x: &Tensor<T>,
    head: &crate::attention::HeadWeights<T>,
) -> Result<[Tensor<T>; 3], AttentionError> {
    Ok([
        project_last(x, &head.w_q)?,
        project_last(x, &head.w_k)?,
        project_last(x, &head.w_v)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Tensor<f64>;

    #[test]
    fn softmax_symmetric_and_stable() {
        let m = M::from_vec([2, 2], vec![0., 0., 1000., 0.]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1)[0], 1.0);
        assert!(s.row(1)[1] >= 0.0 && s.row(1)[1] < 1e-300);
        assert!(s.is_finite());
    }

    /// Reference values computed in 40-digit arithmetic (mpmath):
    /// e^1, e^2, e^3 normalised.
    #[test]
    fn softmax_matches_extended_precision() {
        let m = M::from_vec([1, 3], vec![1., 2., 3.]).unwrap();
        let s = softmax_rows(&m).unwrap();
        let expected = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        for (a, b) in s.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_is_value_output_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = AttentionWeights::<f64>::glorot(4, 2, &mut rng).unwrap();
        let x = M::random_normal([1, 4], &mut rng).unwrap();
        let got = standard_attention(&x, &w, &AttentionConfig::default()).unwrap();
        let mut expected = M::zeros([1, 4]).unwrap();
        for h in w.heads() {
            expected
                .add_assign(&x.matmul(&h.w_v).unwrap().matmul(&h.w_o).unwrap())
                .unwrap();
        }
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = AttentionWeights::<f64>::glorot(4, 1, &mut rng).unwrap();
        let row = M::random_normal([1, 4], &mut rng).unwrap();
        let x = M::from_vec([3, 4], row.data().repeat(3)).unwrap();
        let y = standard_attention(&x, &w, &AttentionConfig::default()).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    /// Per-element loop evaluation of the multihead formula.
    fn loop_reference(x: &M, w: &AttentionWeights<f64>) -> M {
        let (n, d) = (x.rows(), x.cols());
        let dh = w.d_head();
        let mut out = M::zeros([n, d]).unwrap();
        for head in w.heads() {
            let proj = |wm: &M, i: usize, c: usize| -> f64 {
                (0..d).map(|j| x.get(&[i, j]) * wm.get(&[j, c])).sum()
            };
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| proj(&head.w_q, i, c) * proj(&head.w_k, j, c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for o in 0..d {
                    let mut acc = 0.0;
                    for j in 0..n {
                        let p = (logits[j] - mx).exp() / z;
                        for c in 0..dh {
                            acc += p * proj(&head.w_v, j, c) * head.w_o.get(&[c, o]);
                        }
                    }
                    out.set(&[i, o], out.get(&[i, o]) + acc);
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = AttentionWeights::<f64>::glorot(4, 2, &mut rng).unwrap();
        let x = M::random_normal([3, 4], &mut rng).unwrap();
        let got = standard_attention(&x, &w, &AttentionConfig::default()).unwrap();
        assert!(got.max_abs_diff(&loop_reference(&x, &w)).unwrap() < 1e-13);
    }

    #[test]
    fn oracle_cap_refuses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = AttentionWeights::<f64>::glorot(2, 1, &mut rng).unwrap();
        let x = M::zeros([3, 3, 2]).unwrap();
        let cfg = AttentionConfig {
            oracle_cap: 8,
            ..Default::default()
        };
        assert_eq!(
            full_high_order_attention(&x, &w, &cfg).unwrap_err(),
            AttentionError::OracleCap { tokens: 9, cap: 8 }
        );
    }
}
