use hot_core::DenseTensor;
use hot_model::layer::AttentionVariant;
use hot_model::tape::AdjointFault;
use hot_model::training::{finite_diff_check, run_grad_case, GradCase, GradCheckOptions, GradTarget};
use hot_model::Tape;

#[test]
fn quadratic_is_exact() {
    let a = DenseTensor::from_vec([5], vec![1.0, -2.0, 0.5, 3.0, 0.25]).unwrap();
    let b = DenseTensor::from_vec([5], vec![0.1, 0.2, -0.3, 0.4, 0.0]).unwrap();
    let x = DenseTensor::from_vec([5], vec![0.3, -1.2, 2.0, 0.7, -0.4]).unwrap();
    let f = |p: &[DenseTensor]| {
        Ok(p[0]
            .data()
            .iter()
            .zip(a.data())
            .zip(b.data())
            .map(|((x, a), b)| a * x * x + b * x)
            .sum())
    };
    let grad = x.zip_map(&a, |x, a| 2.0 * a * x).unwrap().add(&b).unwrap();
    let r = finite_diff_check(f, &[x], &[grad], GradCheckOptions::default()).unwrap();
    assert_eq!(r.checked, 5);
    assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
}

#[test]
fn every_variant_matches_finite_differences() {
    for target in [GradTarget::Attention, GradTarget::Block] {
        for variant in AttentionVariant::ALL {
            for seed in 0..5 {
                let opts = GradCheckOptions {
                    seed,
                    ..Default::default()
                };
                let r = run_grad_case(&GradCase::new(target, variant, seed), opts).unwrap();
                assert!(r.checked >= 64);
                assert!(
                    r.max_rel_error <= 1e-5,
                    "{target:?} {variant:?} seed {seed}: {} at {:?}",
                    r.max_rel_error,
                    r.worst
                );
            }
        }
    }
}

#[test]
fn corrupted_adjoint_is_detected() {
    for op in ["softmax", "layer_norm", "feature_map"] {
        let variant = if op == "feature_map" {
            AttentionVariant::FactoredLinear
        } else {
            AttentionVariant::FactoredSoftmax
        };
        let mut case = GradCase::new(GradTarget::Block, variant, 0);
        case.fault = Some(AdjointFault {
            op: op.into(),
            factor: 1.5,
        });
        let r = run_grad_case(&case, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 1e-2, "{op}: {}", r.max_rel_error);
    }
}

fn check_op(build: impl Fn(&mut Tape, hot_model::Var) -> hot_model::Var, x: DenseTensor) {
    let mut tape = Tape::new();
    let v = tape.param(x.clone()).unwrap();
    let y = build(&mut tape, v);
    let proj = DenseTensor::from_fn(tape.dims(y).to_vec(), |ix| {
        ix.iter().enumerate().map(|(i, &j)| ((i + 1) * (j + 2)) as f64).sum::<f64>().sin()
    })
    .unwrap();
    let loss = tape.dot_const(y, &proj).unwrap();
    let g = tape.backward(loss).unwrap().get(v).unwrap().clone();
    let f = |p: &[DenseTensor]| {
        let mut tape = Tape::new();
        let v = tape.param(p[0].clone()).unwrap();
        let y = build(&mut tape, v);
        let loss = tape.dot_const(y, &proj).unwrap();
        Ok(tape.value(loss).data()[0])
    };
    let r = finite_diff_check(f, &[x], &[g], GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
}

fn input(dims: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(dims.to_vec(), |ix| {
        let s: usize = ix.iter().enumerate().map(|(i, &j)| (i + 3) * j).sum();
        (s as f64 * 0.37).sin()
    })
    .unwrap()
}

#[test]
fn primitive_adjoints() {
    check_op(|t, x| t.softmax(x).unwrap(), input(&[3, 4]));
    check_op(|t, x| t.gelu(x).unwrap(), input(&[3, 4]));
    check_op(|t, x| t.sum_keep(x, &[1]).unwrap(), input(&[2, 3, 4]));
    check_op(|t, x| t.matricize(x, 1).unwrap(), input(&[2, 3, 4]));
    check_op(|t, x| t.fold(x, 2, &[2, 3, 4]).unwrap(), input(&[4, 6]));
    check_op(|t, x| t.rotary(x, 1, 0, 2, 100.0).unwrap(), input(&[2, 5, 4]));
    check_op(|t, x| t.permute(x, &[2, 0, 1]).unwrap(), input(&[2, 3, 4]));
    check_op(
        |t, x| {
            let a = t.constant(input(&[5, 3])).unwrap();
            t.mode_product(x, a, 1, false).unwrap()
        },
        input(&[2, 3, 4]),
    );
    check_op(
        |t, x| {
            let omega = std::sync::Arc::new(input(&[6, 4]).scale(0.5));
            t.feature_map(x, omega).unwrap()
        },
        input(&[2, 3, 4]),
    );
    check_op(
        |t, x| {
            let g = t.param(input(&[4]).map(|v| 1.0 + v)).unwrap();
            let b = t.param(input(&[4])).unwrap();
            t.layer_norm(x, g, b, 1e-5).unwrap()
        },
        input(&[3, 4]),
    );
    check_op(
        |t, x| {
            let z = t.constant(input(&[2, 3]).map(|v| 2.0 + v)).unwrap();
            t.div_along(x, z, 1, 1e-6).unwrap()
        },
        input(&[2, 3, 4]),
    );
    check_op(
        |t, x| {
            let b = t.constant(input(&[2, 5, 4])).unwrap();
            t.bmm_nt(x, b).unwrap()
        },
        input(&[2, 3, 4]),
    );
    check_op(|t, x| t.cross_entropy(x, &[1, 0]).unwrap(), input(&[2, 3]));
}
