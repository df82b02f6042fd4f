mod common;

use common::{brute_matmul, lcg_matrix, setup, small_net};
use proptest::prelude::*;
use trustlora_core::arithmetic::{extract_vector, merge_add, merge_negate, ComposedModel};
use trustlora_core::checkpoint::model_id;
use trustlora_core::model::TrainMode;
use trustlora_core::{Error, Matrix};

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn delta_with_changed_projection_matches_dense_difference() {
    let (base, mut before) = small_net(21, TrainMode::AAndB);
    let mut after = before.clone();
    for (i, l) in after.layers.iter_mut().enumerate() {
        l.a = lcg_matrix(40 + i as u64, l.a.rows(), l.a.cols(), 1.0);
        l.b = lcg_matrix(50 + i as u64, l.b.rows(), l.b.cols(), 0.4);
    }
    before.layers[1].b = lcg_matrix(60, 3, 2, 0.3);
    let v = extract_vector(&before, &after, None, "src").unwrap();
    for (pre, post) in before.layers.iter().zip(&after.layers) {
        let oracle = brute_matmul(&post.b, &post.a)
            .sub(&brute_matmul(&pre.b, &pre.a))
            .unwrap();
        let dense = v.dense(post.layer).unwrap().unwrap();
        assert!(max_diff(&dense, &oracle) < 1e-12);
    }
    let composed = ComposedModel::new(base.clone()).with_vector(&v, 1.0).unwrap();
    let w = composed.effective_weights().unwrap();
    assert_eq!(w.len(), base.layers.len());
}

#[test]
fn identical_states_extract_to_zero() {
    let (_, a) = small_net(5, TrainMode::AAndB);
    assert!(extract_vector(&a, &a, None, "s").unwrap().is_zero());
}

#[test]
fn merge_endpoints_equal_single_adapters() {
    let (base, cov, sem, _) = setup(7);
    let m = ComposedModel::new(base);
    let x = lcg_matrix(3, 32, 3, 2.0);
    let at0 = merge_add(&m, &cov, &sem, 0.0).unwrap();
    let at1 = merge_add(&m, &cov, &sem, 1.0).unwrap();
    let cov_only = m.with_vector(&cov, 1.0).unwrap();
    let sem_only = m.with_vector(&sem, 1.0).unwrap();
    assert!(at0.forward(&x).unwrap().bit_eq(&cov_only.forward(&x).unwrap()));
    assert!(at1.forward(&x).unwrap().bit_eq(&sem_only.forward(&x).unwrap()));
    assert_eq!(model_id(&at0), model_id(&cov_only));
    assert_eq!(model_id(&at1), model_id(&sem_only));
}

#[test]
fn half_merge_preactivation_is_mean_of_single_deltas() {
    let (base, cov, sem, _) = setup(8);
    let m = ComposedModel::new(base.clone());
    let x = lcg_matrix(4, 16, 3, 2.0);
    let pre = |model: &ComposedModel| model.base.layer_preactivation(0, &x, &model.branches()).unwrap();
    let z_base = pre(&m);
    let z_cov = pre(&m.with_vector(&cov, 1.0).unwrap());
    let z_sem = pre(&m.with_vector(&sem, 1.0).unwrap());
    let z_mix = pre(&merge_add(&m, &cov, &sem, 0.5).unwrap());
    for i in 0..z_base.len() {
        let lhs = z_mix.data()[i] - z_base.data()[i];
        let rhs = 0.5 * (z_cov.data()[i] - z_base.data()[i]) + 0.5 * (z_sem.data()[i] - z_base.data()[i]);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn negating_a_full_vector_returns_the_base() {
    let (base, _, sem, _) = setup(9);
    let m = ComposedModel::new(base);
    let with_sem = m.with_vector(&sem, 1.0).unwrap();
    let back = merge_negate(&with_sem, &sem, 1.0).unwrap();
    assert_eq!(model_id(&back), model_id(&m));
    assert!(back.terms().is_empty());
    let unchanged = merge_negate(&with_sem, &sem, 0.0).unwrap();
    assert_eq!(unchanged, with_sem);
}

#[test]
fn alpha_outside_unit_interval_is_contract_error() {
    let (base, cov, sem, _) = setup(10);
    let m = ComposedModel::new(base);
    for a in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(merge_add(&m, &cov, &sem, a), Err(Error::Contract(_))));
        assert!(matches!(merge_negate(&m, &sem, a), Err(Error::Contract(_))));
    }
}

#[test]
fn three_vector_composition_matches_dense_sum() {
    let (base, v1, v2, v3) = setup(11);
    let m = ComposedModel::new(base.clone());
    let two = merge_add(&m, &v1, &v2, 0.5).unwrap();
    let three = two.with_vector(&v3, 0.5).unwrap();
    // Oracle: W + 0.5·B1A1 + 0.5·B2A2 + 0.5·B3A3, dense, evaluated by loops.
    let mut dense = base.clone();
    for v in [&v1, &v2, &v3] {
        for l in &v.layers {
            let d = brute_matmul(&l.b, &l.a).scale(0.5);
            dense.layers[l.layer].weight = dense.layers[l.layer].weight.add(&d).unwrap();
        }
    }
    let x = lcg_matrix(12, 32, 3, 2.0);
    let oracle = common::forward(&dense, &x, &[]);
    let got = three.forward(&x).unwrap();
    for (r, row) in oracle.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((got.get(r, c) - v).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn add_then_negate_restores_any_model(
        c1 in -2.0f64..2.0,
        c2 in -2.0f64..2.0,
        alpha in 0.0f64..=1.0,
        which in 0usize..3,
    ) {
        let (base, v1, v2, v3) = setup(13);
        let start = ComposedModel::new(base).with_vector(&v1, c1).unwrap().with_vector(&v2, c2).unwrap();
        let tau = [&v1, &v2, &v3][which];
        let added = start.with_vector(tau, alpha).unwrap();
        let back = merge_negate(&added, tau, alpha).unwrap();
        let x = lcg_matrix(14, 8, 3, 2.0);
        prop_assert!(back.forward(&x).unwrap().bit_eq(&start.forward(&x).unwrap()));
        prop_assert_eq!(model_id(&back), model_id(&start));
        prop_assert_eq!(back, start);
    }

    #[test]
    fn composition_is_order_independent(
        coeffs in proptest::collection::vec(-1.0f64..1.0, 3),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let (base, v1, v2, v3) = setup(15);
        let vs = [&v1, &v2, &v3];
        let m = ComposedModel::new(base);
        let mut forward_order = m.clone();
        for i in 0..3 {
            forward_order = forward_order.with_vector(vs[i], coeffs[i]).unwrap();
        }
        let mut shuffled = m;
        for &i in &perm {
            shuffled = shuffled.with_vector(vs[i], coeffs[i]).unwrap();
        }
        prop_assert_eq!(model_id(&forward_order), model_id(&shuffled));
        let x = lcg_matrix(16, 8, 3, 2.0);
        prop_assert!(forward_order.forward(&x).unwrap().bit_eq(&shuffled.forward(&x).unwrap()));
    }

    #[test]
    fn factored_forward_matches_materialized_weights(
        alpha in 0.0f64..=1.0,
        beta in -1.0f64..1.0,
    ) {
        let (base, v1, v2, v3) = setup(17);
        let model = merge_add(&ComposedModel::new(base), &v1, &v2, alpha).unwrap().with_vector(&v3, beta).unwrap();
        let dense = model.materialize().unwrap();
        let x = lcg_matrix(18, 16, 3, 2.0);
        let a = model.forward(&x).unwrap();
        let b = dense.forward(&x, &[]).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-12);
    }
}
