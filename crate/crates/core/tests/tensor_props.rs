use hot_core::kron::kron;
use hot_core::{DenseTensor, Shape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::random_normal(dims.to_vec(), &mut rng).unwrap()
}

#[test]
fn matricization_kronecker_identity_order_four() {
    for seed in 0..10 {
        let t = random(&[2, 3, 4, 5], seed);
        let a1 = random(&[2, 2], 100 + seed);
        let a2 = random(&[3, 3], 200 + seed);
        let a3 = random(&[4, 4], 300 + seed);
        let lhs = t
            .mode_product(&a1, 0)
            .unwrap()
            .mode_product(&a2, 1)
            .unwrap()
            .mode_product(&a3, 2)
            .unwrap()
            .matricize(3)
            .unwrap();
        let k = kron(&kron(&a1, &a2).unwrap(), &a3).unwrap();
        let rhs = t.matricize(3).unwrap().matmul(&k.transpose().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }
}

#[test]
fn identity_with_rectangular_factors() {
    let t = random(&[2, 3, 4], 1);
    let a1 = random(&[5, 2], 2);
    let a2 = random(&[1, 3], 3);
    let lhs = t
        .mode_product(&a1, 0)
        .unwrap()
        .mode_product(&a2, 1)
        .unwrap()
        .matricize(2)
        .unwrap();
    let rhs = t
        .matricize(2)
        .unwrap()
        .matmul(&kron(&a1, &a2).unwrap().transpose().unwrap())
        .unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
}

fn dims_strategy(max_order: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=max_order)
}

proptest! {
    #[test]
    fn fold_inverts_matricize(dims in dims_strategy(5), seed in any::<u64>()) {
        let t = random(&dims, seed);
        for mode in 0..dims.len() {
            let m = t.matricize(mode).unwrap();
            prop_assert_eq!(m.rows(), dims[mode]);
            let back = DenseTensor::fold(&m, mode, &Shape::new(dims.clone()).unwrap()).unwrap();
            prop_assert_eq!(&back, &t);
        }
    }

    #[test]
    fn distinct_mode_products_commute(
        dims in prop::collection::vec(1usize..=4, 2..=4),
        seed in any::<u64>(),
        d1 in 1usize..=3,
        d2 in 1usize..=3,
    ) {
        let t = random(&dims, seed);
        let (i, j) = (0, dims.len() - 1);
        let a = random(&[d1, dims[i]], seed.wrapping_add(1));
        let b = random(&[d2, dims[j]], seed.wrapping_add(2));
        let ab = t.mode_product(&a, i).unwrap().mode_product(&b, j).unwrap();
        let ba = t.mode_product(&b, j).unwrap().mode_product(&a, i).unwrap();
        prop_assert!(ab.max_abs_diff(&ba).unwrap() <= 1e-12);
    }

    #[test]
    fn pooling_is_permutation_invariant(seed in any::<u64>(), shift in 1usize..4) {
        let t = random(&[3, 4, 2], seed);
        // cyclic shift along mode 1, pooled along mode 0
        let shifted = DenseTensor::from_fn([3, 4, 2], |ix| t.get(&[ix[0], (ix[1] + shift) % 4, ix[2]])).unwrap();
        let a = t.pool_sum_except(0).unwrap();
        let b = shifted.pool_sum_except(0).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }
}

#[test]
fn fold_round_trip_explicit_enumeration() {
    let t = DenseTensor::from_vec([2, 3, 4], (1..=24).map(f64::from).collect()).unwrap();
    let m = t.matricize(0).unwrap();
    let back = DenseTensor::fold(&m, 0, t.shape()).unwrap();
    for (i, v) in back.data().iter().enumerate() {
        assert_eq!(*v, (i + 1) as f64);
    }
}
