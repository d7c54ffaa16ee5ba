use hot_core::attention::{
    factorized_attention_linear, factorized_attention_softmax, full_attention_linear,
    full_high_order_attention, project_last, FeatureMapSpec,
};
use hot_core::{AttentionConfig, AttentionWeights, DenseTensor, FeatureMap};
use hot_model::layer::{
    block_attention, hot_block_forward, patch_embed, rotary_encode, AttentionVariant, BlockWeights,
    HOTBlockConfig, HeadConfig, HeadPooling, HotModel, ModelConfig, NormPlacement, PatchEmbedConfig,
    RotaryConfig, Task,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(dims: &[usize], seed: u64) -> DenseTensor {
    DenseTensor::random_normal(dims.to_vec(), &mut rng(seed)).unwrap()
}

#[test]
fn rotary_position_zero_is_identity_and_norm_preserving() {
    let cfg = RotaryConfig::new(vec![true, false]);
    let t = normal(&[5, 3, 6], 1);
    let r = rotary_encode(&t, &cfg).unwrap();
    for j in 0..3 {
        for c in 0..6 {
            assert_eq!(r.get(&[0, j, c]), t.get(&[0, j, c]));
        }
    }
    for i in 0..5 {
        for j in 0..3 {
            let norm = |x: &DenseTensor| (0..6).map(|c| x.get(&[i, j, c]).powi(2)).sum::<f64>();
            assert!((norm(&r) - norm(&t)).abs() <= 1e-12);
        }
    }
}

#[test]
fn rotary_dot_depends_on_offset_only() {
    let cfg = RotaryConfig::new(vec![true]);
    let q = normal(&[1, 4], 2).data().to_vec();
    let k = normal(&[1, 4], 3).data().to_vec();
    let at = |v: &[f64], p: usize| {
        let t = DenseTensor::from_fn([8, 4], |ix| v[ix[1]]).unwrap();
        let r = rotary_encode(&t, &cfg).unwrap();
        r.row(p).to_vec()
    };
    let dot = |p1: usize, p2: usize| -> f64 { at(&q, p1).iter().zip(at(&k, p2)).map(|(a, b)| a * b).sum() };
    for delta in 0..4 {
        let reference = dot(delta, 0);
        for p2 in 1..(8 - delta) {
            assert!((dot(p2 + delta, p2) - reference).abs() <= 1e-12);
        }
    }
}

#[test]
fn rotary_rejects_odd_head_dim() {
    let cfg = RotaryConfig::new(vec![true]);
    assert!(rotary_encode(&normal(&[3, 5], 0), &cfg).is_err());
    let mut block = HOTBlockConfig::new(vec![3, 4], 6, 2);
    block.rotary = Some(RotaryConfig::new(vec![true, true]));
    assert!(block.validate().is_err());
}

#[test]
fn block_preserves_shape() {
    let cfg = HOTBlockConfig::new(vec![4, 5], 8, 2);
    let w = BlockWeights::init(&cfg, &mut rng(0)).unwrap();
    let x = normal(&[4, 5, 8], 1);
    let y = hot_block_forward(&x, &cfg, &w).unwrap();
    assert_eq!(y.dims(), &[4, 5, 8]);
    assert!(y.is_finite());
}

fn layer_norm(x: &DenseTensor, eps: f64) -> DenseTensor {
    let d = x.dims()[x.order() - 1];
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            row.iter().map(move |v| (v - mean) / (var + eps).sqrt())
        })
        .collect();
    DenseTensor::from_vec(x.dims().to_vec(), data).unwrap()
}

#[test]
fn zero_weights_reduce_to_double_layer_norm() {
    let cfg = HOTBlockConfig::new(vec![4, 5], 8, 2);
    let mut w = BlockWeights::init(&cfg, &mut rng(0)).unwrap();
    let zero = |t: &DenseTensor| DenseTensor::zeros(t.dims().to_vec()).unwrap();
    w.attention = AttentionWeights::new(
        w.attention
            .heads()
            .iter()
            .map(|h| hot_core::attention::HeadWeights {
                w_q: zero(&h.w_q),
                w_k: zero(&h.w_k),
                w_v: zero(&h.w_v),
                w_o: zero(&h.w_o),
            })
            .collect(),
    )
    .unwrap();
    w.w1 = zero(&w.w1);
    w.w2 = zero(&w.w2);
    let x = normal(&[4, 5, 8], 2);
    let y = hot_block_forward(&x, &cfg, &w).unwrap();
    let expected = layer_norm(&layer_norm(&x, 1e-5), 1e-5);
    assert!(y.max_abs_diff(&expected).unwrap() <= 1e-12);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

// Maclaurin series, accurate to roundoff for |x| < 3
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn affine(x: &DenseTensor, w: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let y = project_last(x, w).unwrap();
    let d = b.numel();
    let data = y
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(b.data()).map(|(a, b)| a + b).collect::<Vec<_>>())
        .collect();
    DenseTensor::from_vec(y.dims().to_vec(), data).unwrap()
}

#[test]
fn all_off_mask_is_residual_mlp() {
    let mut cfg = HOTBlockConfig::new(vec![3, 4], 8, 2);
    cfg.mode_mask = vec![false, false];
    let w = BlockWeights::init(&cfg, &mut rng(5)).unwrap();
    let x = normal(&[3, 4, 8], 6);
    let y = hot_block_forward(&x, &cfg, &w).unwrap();
    // per-token MLP: value and output projections only
    let mut mixed = x.clone();
    for h in w.attention.heads() {
        mixed.add_assign(&project_last(&project_last(&x, &h.w_v).unwrap(), &h.w_o).unwrap()).unwrap();
    }
    let y1 = layer_norm(&mixed, 1e-5);
    let hidden = affine(&y1, &w.w1, &w.b1).map(gelu);
    let f = affine(&hidden, &w.w2, &w.b2);
    let expected = layer_norm(&y1.add(&f).unwrap(), 1e-5);
    assert!(y.max_abs_diff(&expected).unwrap() <= 1e-12);
}

#[test]
fn pre_norm_differs_from_post_norm() {
    let mut cfg = HOTBlockConfig::new(vec![3, 4], 8, 2);
    let w = BlockWeights::init(&cfg, &mut rng(5)).unwrap();
    let x = normal(&[3, 4, 8], 6);
    let post = hot_block_forward(&x, &cfg, &w).unwrap();
    cfg.norm = NormPlacement::Pre;
    let pre = hot_block_forward(&x, &cfg, &w).unwrap();
    assert!(post.max_abs_diff(&pre).unwrap() > 1e-3);
}

/// The tape attention sublayer against the direct implementations.
#[test]
fn tape_attention_matches_core_kernels() {
    let dims = vec![3, 4];
    let x = normal(&[3, 4, 8], 10);
    let w = AttentionWeights::glorot(8, 2, &mut rng(11)).unwrap();
    let core_cfg = AttentionConfig::default();
    let fm = FeatureMap::new(FeatureMapSpec::new(32, 4, 7)).unwrap();
    for variant in AttentionVariant::ALL {
        let mut cfg = HOTBlockConfig::new(dims.clone(), 8, 2);
        cfg.variant = variant;
        cfg.feature_map.num_features = 32;
        cfg.feature_map.seed = 7;
        let tape = block_attention(&x, &cfg, &w).unwrap();
        let direct = match variant {
            AttentionVariant::FullSoftmax => full_high_order_attention(&x, &w, &core_cfg).unwrap(),
            AttentionVariant::FactoredSoftmax => factorized_attention_softmax(&x, &w, &core_cfg).unwrap(),
            AttentionVariant::FullLinear => full_attention_linear(&x, &w, &fm, &core_cfg).unwrap().output,
            AttentionVariant::FactoredLinear => factorized_attention_linear(&x, &w, &fm, &core_cfg).unwrap().output,
        };
        assert!(tape.max_abs_diff(&direct).unwrap() <= 1e-12, "{variant:?}");
    }
}

#[test]
fn full_variants_need_every_mode() {
    let mut cfg = HOTBlockConfig::new(vec![3, 4], 8, 2);
    cfg.variant = AttentionVariant::FullSoftmax;
    cfg.mode_mask = vec![true, false];
    assert!(cfg.validate().is_err());
}

#[test]
fn patch_embed_time_series_length() {
    let cfg = PatchEmbedConfig::new(vec![1, 4]);
    assert_eq!(cfg.token_dims(&[7, 96]).unwrap(), vec![7, 24]);
    assert!(cfg.token_dims(&[7, 94]).is_err());
    let image = PatchEmbedConfig::new(vec![4, 4, 4]);
    assert_eq!(image.token_dims(&[28, 28, 28]).unwrap(), vec![7, 7, 7]);
    let mut overlapping = PatchEmbedConfig::new(vec![1, 4]);
    overlapping.stride = vec![1, 2];
    assert!(overlapping.token_dims(&[7, 96]).is_err());
}

#[test]
fn identity_patch_embed_is_reshape() {
    let x = normal(&[2, 3, 4, 5], 3);
    let y = patch_embed(
        &x,
        &PatchEmbedConfig::new(vec![1, 1]),
        &DenseTensor::identity(5).unwrap(),
        &DenseTensor::zeros([5]).unwrap(),
    )
    .unwrap();
    assert_eq!(y, x);
}

#[test]
fn patch_embed_groups_contiguous_patches() {
    // one channel, patch 2 along the second mode: token t holds x[.., 2t..2t+2]
    let x = DenseTensor::from_vec([1, 1, 4, 1], vec![1., 2., 3., 4.]).unwrap();
    let w = DenseTensor::from_vec([2, 2], vec![1., 0., 0., 1.]).unwrap();
    let y = patch_embed(&x, &PatchEmbedConfig::new(vec![1, 2]), &w, &DenseTensor::zeros([2]).unwrap()).unwrap();
    assert_eq!(y.dims(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1., 2., 3., 4.]);
}

#[test]
fn organ_like_classifier_emits_eleven_logits() {
    let mut cfg = ModelConfig::new(vec![28, 28, 28], 1, vec![4, 4, 4], 8, 2, HeadConfig::new(Task::Classify { classes: 11 }));
    cfg.rotary = Some(RotaryConfig::new(vec![false, false, false]));
    let model = HotModel::new(cfg).unwrap();
    let x = normal(&model.input_dims(1), 1);
    let y = model.forward(&x).unwrap();
    assert_eq!(y.dims(), &[1, 11]);
}

#[test]
fn forecast_head_emits_horizon_by_variables() {
    let mut cfg = ModelConfig::new(vec![8, 96], 1, vec![1, 4], 8, 2, HeadConfig::new(Task::Forecast { horizon: 96 }));
    cfg.rotary = Some(RotaryConfig::new(vec![false, true]));
    let model = HotModel::new(cfg.clone()).unwrap();
    let y = model.forward(&normal(&model.input_dims(2), 3)).unwrap();
    assert_eq!(y.dims(), &[2, 96, 8]);
    cfg.head.pooling = HeadPooling::Flatten;
    let model = HotModel::new(cfg).unwrap();
    let y = model.forward(&normal(&model.input_dims(2), 3)).unwrap();
    assert_eq!(y.dims(), &[2, 96, 8]);
}

#[test]
fn flatten_head_respects_cap() {
    let mut cfg = ModelConfig::new(vec![8, 96], 1, vec![1, 4], 8, 2, HeadConfig::new(Task::Forecast { horizon: 4 }));
    cfg.head.pooling = HeadPooling::Flatten;
    cfg.head.flatten_cap = 100;
    assert!(HotModel::new(cfg).is_err());
}

#[test]
fn mean_pool_classifier_is_permutation_invariant() {
    let cfg = ModelConfig::new(vec![3, 4], 2, vec![1, 1], 8, 2, HeadConfig::new(Task::Classify { classes: 3 }));
    let model = HotModel::new(cfg).unwrap();
    let x = normal(&model.input_dims(2), 4);
    let perm = [2, 0, 3, 1];
    let shuffled = DenseTensor::from_fn(x.dims().to_vec(), |ix| x.get(&[ix[0], ix[1], perm[ix[2]], ix[3]])).unwrap();
    let a = model.forward(&x).unwrap();
    let b = model.forward(&shuffled).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
}

#[test]
fn parameter_counts_equal_across_variants() {
    let counts: Vec<usize> = AttentionVariant::ALL
        .iter()
        .map(|&v| {
            let mut cfg = ModelConfig::new(vec![6, 24], 1, vec![1, 4], 16, 2, HeadConfig::new(Task::Forecast { horizon: 4 }));
            cfg.variant = v;
            HotModel::new(cfg).unwrap().param_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    let masked: Vec<usize> = [[true, true], [true, false], [false, true], [false, false]]
        .iter()
        .map(|m| {
            let mut cfg = ModelConfig::new(vec![6, 24], 1, vec![1, 4], 16, 2, HeadConfig::new(Task::Forecast { horizon: 4 }));
            cfg.mode_mask = Some(m.to_vec());
            HotModel::new(cfg).unwrap().param_count()
        })
        .collect();
    assert!(masked.iter().all(|&c| c == counts[0]));
}

#[test]
fn forward_is_deterministic() {
    let mut cfg = ModelConfig::new(vec![4, 8], 1, vec![1, 2], 8, 2, HeadConfig::new(Task::Forecast { horizon: 3 }));
    cfg.variant = AttentionVariant::FactoredLinear;
    let x = normal(&[2, 4, 8, 1], 9);
    let a = HotModel::new(cfg.clone()).unwrap().forward(&x).unwrap();
    let b = HotModel::new(cfg).unwrap().forward(&x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = ModelConfig::new(vec![4, 8], 1, vec![1, 2], 8, 2, HeadConfig::new(Task::Forecast { horizon: 3 }));
    cfg.depth = 2;
    cfg.init_seed = 17;
    let model = HotModel::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = HotModel::load(dir.path()).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"blocks.1.ffn.w2\": \"blocks.1.ffn.w2.hot\""));
}

#[test]
fn config_rejects_unknown_keys() {
    let json = r#"{"input_dims":[4,8],"in_channels":1,"patch":{"size":[1,2],"stride":[1,2]},
        "d_model":8,"n_heads":2,"head":{"task":{"forecast":{"horizon":3}}},"typo":1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    let ok = json.replace(",\"typo\":1", "");
    let cfg: ModelConfig = serde_json::from_str(&ok).unwrap();
    assert_eq!(cfg.block_config().unwrap().ffn_hidden, 32);
}
