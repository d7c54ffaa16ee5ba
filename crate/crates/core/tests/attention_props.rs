use hot_core::attention::{
    factorized_attention_linear, factorized_attention_materialized, factorized_attention_softmax,
    full_attention_linear, full_high_order_attention, head_factors, kernel_attention_matrix,
    mode_attention_matrix, pooled, project_last, softmax_rows, standard_attention, FeatureMapSpec,
    Pooling,
};
use hot_core::{AttentionConfig, AttentionWeights, DenseTensor, FeatureMap};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(positional: &[usize], d: usize, seed: u64) -> DenseTensor {
    let mut dims = positional.to_vec();
    dims.push(d);
    DenseTensor::random_normal(dims, &mut rng(seed)).unwrap()
}

fn shapes_up_to_64() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 1..=8 {
        out.push(vec![a]);
        for b in 1..=8 {
            if a * b <= 64 {
                out.push(vec![a, b]);
            }
            for c in 1..=4 {
                if a * b * c <= 64 && a <= 4 && b <= 4 {
                    out.push(vec![a, b, c]);
                }
            }
        }
    }
    out
}

#[test]
fn factorized_equals_materialized_kronecker() {
    let cfg = AttentionConfig::default();
    for (i, dims) in shapes_up_to_64().into_iter().enumerate() {
        let seed = i as u64;
        let w = AttentionWeights::glorot(4, 2, &mut rng(1000 + seed)).unwrap();
        let x = input(&dims, 4, seed);
        let fast = factorized_attention_softmax(&x, &w, &cfg).unwrap();
        let slow = factorized_attention_materialized(&x, &w, &cfg).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-10, "{dims:?}");
    }
}

#[test]
fn single_mode_variants_reduce_to_standard_attention() {
    let cfg = AttentionConfig::default();
    for seed in 0..5 {
        let w = AttentionWeights::glorot(6, 2, &mut rng(seed)).unwrap();
        let x = input(&[7], 6, 50 + seed);
        let reference = standard_attention(&x, &w, &cfg).unwrap();
        let fact = factorized_attention_softmax(&x, &w, &cfg).unwrap();
        let full = full_high_order_attention(&x, &w, &cfg).unwrap();
        assert!(fact.max_abs_diff(&reference).unwrap() <= 1e-12);
        assert!(full.max_abs_diff(&reference).unwrap() <= 1e-12);
    }
}

#[test]
fn full_attention_is_flatten_then_standard() {
    let cfg = AttentionConfig::default();
    let w = AttentionWeights::glorot(4, 2, &mut rng(3)).unwrap();
    let x = input(&[2, 2], 4, 4);
    let y = full_high_order_attention(&x, &w, &cfg).unwrap();
    assert_eq!(y.dims(), x.dims());
    let flat = standard_attention(&x.reshape([4, 4]).unwrap(), &w, &cfg).unwrap();
    assert!(y.reshape([4, 4]).unwrap().max_abs_diff(&flat).unwrap() <= 1e-15);
}

#[test]
fn implied_attention_matrices_are_row_stochastic() {
    let cfg = AttentionConfig::default();
    let w = AttentionWeights::glorot(8, 2, &mut rng(9)).unwrap();
    let x = input(&[3, 4, 2], 8, 10);
    for h in 0..2 {
        let s = head_factors(&x, &w, h, &cfg).unwrap().materialize().unwrap();
        for i in 0..s.rows() {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(s.row(i).iter().all(|&v| v > 0.0));
        }
    }
}

fn permute_mode(x: &DenseTensor, mode: usize, perm: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(x.dims().to_vec(), |ix| {
        let mut src = ix.to_vec();
        src[mode] = perm[ix[mode]];
        x.get(&src)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), mode in 0usize..2, shuffle in any::<u64>()) {
        let cfg = AttentionConfig::default();
        let w = AttentionWeights::glorot(4, 2, &mut rng(seed)).unwrap();
        let x = input(&[3, 4], 4, seed.wrapping_add(1));
        let n = x.dims()[mode];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = shuffle;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let y = factorized_attention_softmax(&x, &w, &cfg).unwrap();
        let y_perm = factorized_attention_softmax(&permute_mode(&x, mode, &perm), &w, &cfg).unwrap();
        prop_assert!(y_perm.max_abs_diff(&permute_mode(&y, mode, &perm)).unwrap() <= 1e-10);
    }

    #[test]
    fn softmax_scores_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let q = DenseTensor::random_normal([3, 4, 2], &mut r).unwrap();
        let k = DenseTensor::random_normal([3, 4, 2], &mut r).unwrap();
        let cfg = AttentionConfig::default();
        let s = mode_attention_matrix(&q, &k, 1, &cfg).unwrap();
        let qt = pooled(&q, 1, Pooling::Sum).unwrap();
        let kt = pooled(&k, 1, Pooling::Sum).unwrap();
        let scores = qt.matmul(&kt.transpose().unwrap()).unwrap().scale(cfg.scale_for(2));
        let shifted = softmax_rows(&scores.map(|v| v + shift)).unwrap();
        prop_assert!(s.max_abs_diff(&shifted).unwrap() <= 1e-12);
    }
}

#[test]
fn mean_pooling_scales_pooled_matrices() {
    let q = input(&[2, 3], 2, 1);
    let sum = pooled(&q, 0, Pooling::Sum).unwrap();
    let mean = pooled(&q, 0, Pooling::Mean).unwrap();
    assert!(sum.scale(1.0 / 3.0).max_abs_diff(&mean).unwrap() <= 1e-15);
}

/// `E_ω[φ(q)·φ(k)] = exp(q·k)`, averaged over independent draws of ω.
#[test]
fn random_features_estimate_softmax_kernel() {
    let mut r = rng(42);
    for _ in 0..5 {
        let q = DenseTensor::random_uniform([4], -0.5, 0.5, &mut r).unwrap();
        let k = DenseTensor::random_uniform([4], -0.5, 0.5, &mut r).unwrap();
        let exact: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>().exp();
        let estimate = (0..10u64)
            .map(|seed| {
                let fm = FeatureMap::new(FeatureMapSpec::new(4096, 4, seed)).unwrap();
                let pq = fm.apply(q.data()).unwrap();
                let pk = fm.apply(k.data()).unwrap();
                pq.iter().zip(&pk).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
            / 10.0;
        assert!(((estimate - exact) / exact).abs() <= 0.05, "{estimate} vs {exact}");
    }
}

/// Inputs for the statistical comparisons: modest scale so pooled logits
/// stay in the regime where positive random features have low variance.
fn kernel_case(seed: u64, positional: &[usize], d: usize, heads: usize) -> (DenseTensor, AttentionWeights) {
    let mut r = rng(seed);
    let w = AttentionWeights::glorot(d, heads, &mut r).unwrap();
    let mut dims = positional.to_vec();
    dims.push(d);
    let x = DenseTensor::random_uniform(dims, -0.5, 0.5, &mut r).unwrap();
    (x, w)
}

#[test]
fn kernelized_factorized_tracks_softmax_factorized() {
    let cfg = AttentionConfig::default();
    let mut total = 0.0;
    for seed in 0..10u64 {
        let (x, w) = kernel_case(seed, &[4, 5], 4, 1);
        let fm = FeatureMap::new(FeatureMapSpec::new(2048, 4, 500 + seed)).unwrap();
        let soft = factorized_attention_softmax(&x, &w, &cfg).unwrap();
        let lin = factorized_attention_linear(&x, &w, &fm, &cfg).unwrap();
        assert_eq!(lin.floored, 0);
        total += lin.output.rel_frobenius_error(&soft).unwrap();
    }
    let mean = total / 10.0;
    assert!(mean <= 0.1, "mean relative error {mean}");
}

#[test]
fn full_linear_tracks_full_softmax() {
    let cfg = AttentionConfig::default();
    let mut total = 0.0;
    for seed in 0..10u64 {
        let (x, w) = kernel_case(seed, &[3, 4], 4, 1);
        let fm = FeatureMap::new(FeatureMapSpec::new(2048, 4, 900 + seed)).unwrap();
        let exact = full_high_order_attention(&x, &w, &cfg).unwrap();
        let lin = full_attention_linear(&x, &w, &fm, &cfg).unwrap();
        total += lin.output.rel_frobenius_error(&exact).unwrap();
    }
    assert!(total / 10.0 <= 0.1, "mean relative error {}", total / 10.0);
}

/// At one positional mode both linear variants equal kernelized standard
/// attention evaluated through the explicit N × N matrix.
#[test]
fn single_mode_linear_variants_match_explicit_kernel_attention() {
    let cfg = AttentionConfig::default();
    let (x, w) = kernel_case(4, &[6], 4, 2);
    let fm = FeatureMap::new(FeatureMapSpec::new(64, 2, 1)).unwrap();
    let mut reference = DenseTensor::zeros([6, 4]).unwrap();
    for head in w.heads() {
        let q = x.matmul(&head.w_q).unwrap();
        let k = x.matmul(&head.w_k).unwrap();
        let v = x.matmul(&head.w_v).unwrap();
        let s = kernel_attention_matrix(&q, &k, &fm, &cfg).unwrap();
        reference
            .add_assign(&project_last(&s.matmul(&v).unwrap(), &head.w_o).unwrap())
            .unwrap();
    }
    let fact = factorized_attention_linear(&x, &w, &fm, &cfg).unwrap().output;
    let full = full_attention_linear(&x, &w, &fm, &cfg).unwrap().output;
    assert!(fact.max_abs_diff(&reference).unwrap() <= 1e-12);
    assert_eq!(fact, full);
}

#[test]
fn masked_modes_use_identity_factors() {
    let w = AttentionWeights::glorot(4, 1, &mut rng(2)).unwrap();
    let x = input(&[3, 4], 4, 3);
    let cfg = AttentionConfig {
        mode_mask: Some(vec![false, false]),
        ..Default::default()
    };
    let y = factorized_attention_softmax(&x, &w, &cfg).unwrap();
    let h = &w.heads()[0];
    let expected = project_last(&project_last(&x, &h.w_v).unwrap(), &h.w_o).unwrap();
    assert!(y.max_abs_diff(&expected).unwrap() <= 1e-14);
}

#[test]
fn single_precision_path_runs() {
    let w = AttentionWeights::glorot(4, 2, &mut rng(2)).unwrap();
    let x = input(&[2, 3], 4, 3);
    let cfg64 = AttentionConfig::default();
    let y64 = factorized_attention_softmax(&x, &w, &cfg64).unwrap();
    let w32 = hot_core::attention::AttentionWeights::<f32>::new(
        w.heads()
            .iter()
            .map(|h| hot_core::attention::HeadWeights {
                w_q: h.w_q.cast(),
                w_k: h.w_k.cast(),
                w_v: h.w_v.cast(),
                w_o: h.w_o.cast(),
            })
            .collect(),
    )
    .unwrap();
    let y32 = factorized_attention_softmax(&x.cast::<f32>(), &w32, &Default::default()).unwrap();
    assert!(y32.cast::<f64>().max_abs_diff(&y64).unwrap() < 1e-5);
}
