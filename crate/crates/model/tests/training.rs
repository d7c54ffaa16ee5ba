use hot_core::DenseTensor;
use hot_model::layer::{HeadConfig, HotModel, ModelConfig, Params, Task};
use hot_model::training::{
    adam_step, auc, auc_ovr, cross_entropy, evaluate, forecast_target, gen_synthetic, linear_readout_mse, mae,
    metric, mse, smape, train, AdamConfig, OptimState, SyntheticTask, SyntheticTaskSpec, Targets, TrainConfig,
    TrainError,
};

fn single(value: Vec<f64>) -> Params {
    let mut p = Params::new();
    let n = value.len();
    p.insert("w", DenseTensor::from_vec([n], value).unwrap()).unwrap();
    p
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = single(vec![1.0, -2.0, 3.0]);
    let before = p.clone();
    let mut state = OptimState::new(AdamConfig::default(), &p).unwrap();
    for _ in 0..3 {
        adam_step(&mut state, &[DenseTensor::zeros([3]).unwrap()], &mut p).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = single(vec![0.0, 0.0]);
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut state = OptimState::new(cfg, &p).unwrap();
    adam_step(&mut state, &[DenseTensor::from_vec([2], vec![3.0, -0.5]).unwrap()], &mut p).unwrap();
    let w = p.get("w").unwrap().data();
    assert!((w[0] + 0.1).abs() < 1e-8);
    assert!((w[1] - 0.1).abs() < 1e-7);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut p = single(vec![0.3, -0.7, 1.1]);
        let mut state = OptimState::new(AdamConfig::default(), &p).unwrap();
        for k in 0..20 {
            let g: Vec<f64> = p.get("w").unwrap().data().iter().map(|v| 2.0 * v + k as f64 * 0.01).collect();
            adam_step(&mut state, &[DenseTensor::from_vec([3], g).unwrap()], &mut p).unwrap();
        }
        p.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_aborts_on_nan_gradient() {
    let mut p = single(vec![1.0, 2.0]);
    let before = p.clone();
    let mut state = OptimState::new(AdamConfig::default(), &p).unwrap();
    let err = adam_step(&mut state, &[DenseTensor::from_vec([2], vec![0.5, f64::NAN]).unwrap()], &mut p);
    assert!(matches!(err, Err(TrainError::NonFiniteGradient { index: 1, .. })));
    assert_eq!(p, before);
    assert_eq!(state.step, 0);
}

#[test]
fn regression_metrics() {
    let x = [1.0, -2.0, 0.5];
    assert_eq!(mse(&x, &x).unwrap(), 0.0);
    assert_eq!(mae(&x, &x).unwrap(), 0.0);
    assert_eq!(smape(&x, &x).unwrap(), 0.0);
    assert!((mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap() - 2.5).abs() < 1e-15);
    assert!((mae(&[1.0, -3.0], &[0.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
    assert!((smape(&[1.0], &[-1.0]).unwrap() - 2.0).abs() < 1e-7);
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn auc_properties() {
    let pos = [false, false, true, true];
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
    assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
    assert_eq!(auc(&[0.5; 4], &pos).unwrap(), 0.5);
    let scores = [0.3, -1.2, 0.9, 0.1, 2.0, -0.4];
    let labels = [true, false, true, false, true, true];
    let a = auc(&scores, &labels).unwrap();
    let warped: Vec<f64> = scores.iter().map(|s: &f64| s.exp() * 3.0 + 1.0).collect();
    assert_eq!(auc(&warped, &labels).unwrap(), a);
    // pairs: 4 positives x 2 negatives, 7 ordered correctly
    assert!((a - 7.0 / 8.0).abs() < 1e-15);
}

#[test]
fn classification_metrics() {
    let c = 5;
    let logits = DenseTensor::zeros([3, c]).unwrap();
    let ce = cross_entropy(&logits, &[0, 3, 4]).unwrap();
    assert!((ce - (c as f64).ln()).abs() < 1e-12);
    let sharp = DenseTensor::from_fn([4, 3], |ix| if ix[1] == ix[0] % 3 { 5.0 } else { 0.0 }).unwrap();
    assert_eq!(auc_ovr(&sharp, &[0, 1, 2, 0]).unwrap(), 1.0);
}

fn forecast_spec(seed: u64, noise: f64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task: SyntheticTask::SeparableForecast {
            variables: 6,
            length: 24,
            horizon: 4,
            patch: 4,
        },
        train: 512,
        val: 128,
        noise,
        seed,
    }
}

#[test]
fn synthetic_is_seeded() {
    let a = gen_synthetic(&forecast_spec(3, 0.1)).unwrap();
    let b = gen_synthetic(&forecast_spec(3, 0.1)).unwrap();
    let c = gen_synthetic(&forecast_spec(4, 0.1)).unwrap();
    assert_eq!(a.train.inputs, b.train.inputs);
    assert_eq!(a.val.targets, b.val.targets);
    assert_ne!(a.train.inputs, c.train.inputs);
    let voxel = |seed| SyntheticTaskSpec {
        task: SyntheticTask::VoxelClassify {
            side: [8, 8, 8],
            classes: 3,
        },
        train: 16,
        val: 4,
        noise: 0.1,
        seed,
    };
    let v = gen_synthetic(&voxel(1)).unwrap();
    assert_eq!(v, gen_synthetic(&voxel(1)).unwrap());
    assert_eq!(v.train.inputs.dims(), &[16, 8, 8, 8, 1]);
}

#[test]
fn noise_free_targets_follow_the_generator() {
    let data = gen_synthetic(&forecast_spec(9, 0.0)).unwrap();
    let coef = data.coefficients.as_ref().unwrap();
    let Targets::Values(y) = &data.train.targets else { panic!("forecast targets") };
    let row = 6 * 24;
    let out = 4 * 6;
    for i in 0..data.train.len() {
        let x = &data.train.inputs.data()[i * row..(i + 1) * row];
        let expect = forecast_target(x, 6, 24, 4, coef);
        let got = &y.data()[i * out..(i + 1) * out];
        for (e, g) in expect.iter().zip(got) {
            assert!((e - g).abs() <= 1e-12);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = forecast_spec(0, 0.0);
    spec.task = SyntheticTask::SeparableForecast {
        variables: 6,
        length: 22,
        horizon: 4,
        patch: 4,
    };
    assert!(gen_synthetic(&spec).is_err());
    spec = forecast_spec(0, -1.0);
    assert!(gen_synthetic(&spec).is_err());
}

fn forecast_model(seed: u64) -> HotModel {
    let mut cfg = ModelConfig::new(vec![6, 24], 1, vec![1, 4], 16, 2, HeadConfig::new(Task::Forecast { horizon: 4 }));
    cfg.init_seed = seed;
    HotModel::new(cfg).unwrap()
}

fn train_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 32,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        seed,
        eval_every: 50,
    }
}

#[test]
fn loss_halves_within_two_hundred_steps() {
    for seed in 0..5 {
        let data = gen_synthetic(&forecast_spec(seed, 0.05)).unwrap();
        let mut model = forecast_model(seed);
        let report = train(&mut model, &data, &train_cfg(200, seed)).unwrap();
        let start = metric(&report.initial_train, "mse").unwrap();
        let end = metric(&report.final_train, "mse").unwrap();
        assert!(end <= 0.5 * start, "seed {seed}: {start} -> {end}");
        assert_eq!(report.rows.len(), 201);
        assert!(report.best_by_mae.is_some() && report.best_by_mse.is_some());
    }
}

#[test]
fn trained_model_beats_linear_readout() {
    let data = gen_synthetic(&forecast_spec(1, 0.05)).unwrap();
    let (_, linear_val) = linear_readout_mse(&data, 1e-3).unwrap();
    let mut model = forecast_model(1);
    train(&mut model, &data, &train_cfg(500, 1)).unwrap();
    let hot_val = metric(&evaluate(&model, &data.val).unwrap(), "mse").unwrap();
    assert!(hot_val < linear_val, "hot {hot_val} linear {linear_val}");
}

#[test]
fn training_is_deterministic() {
    let data = gen_synthetic(&forecast_spec(2, 0.05)).unwrap();
    let run = || {
        let mut model = forecast_model(2);
        let report = train(&mut model, &data, &train_cfg(10, 2)).unwrap();
        (report.rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), model.params().clone())
    };
    assert_eq!(run(), run());
}
