use proptest::prelude::*;
use wog::rng::rng;
use wog::tensor::{grad_check, registered_ops, run_op_suite, Graph, Tensor};
use wog::training::{flow_target_from, make_flow_target};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn every_registered_op_passes() {
    for r in run_op_suite(2, 17, 1e-5).unwrap() {
        assert!(r.max_rel_error < 1e-4, "{} {}", r.name, r.max_rel_error);
    }
    assert!(registered_ops().len() >= 25);
}

#[test]
fn matmul_matches_naive_product() {
    let a = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng(1));
    let b = Tensor::uniform([4, 2], -1.0, 1.0, &mut rng(2));
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let expect: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
            assert!((g.data(c)[i * 2 + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn flow_target_identity_by_hand() {
    let a1 = tensor(&[1, 2], vec![1.0, -2.0]);
    let a0 = tensor(&[1, 2], vec![0.5, 0.5]);
    let ft = flow_target_from(&a1, &a0, 0.25).unwrap();
    assert_eq!(ft.a_tau.data(), &[0.625, -0.125]);
    assert_eq!(ft.v_star.data(), &[0.5, -2.5]);
    assert!(flow_target_from(&a1, &tensor(&[2, 1], vec![0.0, 0.0]), 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = Tensor::uniform([rows, cols], -scale, scale, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        for row in g.data(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn velocity_target_ignores_tau(
        a1 in prop::collection::vec(-3.0f64..3.0, 6),
        a0 in prop::collection::vec(-3.0f64..3.0, 6),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let (a1, a0) = (tensor(&[2, 3], a1), tensor(&[2, 3], a0));
        let x = flow_target_from(&a1, &a0, t1).unwrap();
        let y = flow_target_from(&a1, &a0, t2).unwrap();
        prop_assert_eq!(&x.v_star, &y.v_star);
        for i in 0..6 {
            let expect = (1.0 - t1) * a0.data()[i] + t1 * a1.data()[i];
            prop_assert!((x.a_tau.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_tau_in_unit_interval(seed in any::<u64>()) {
        let ft = make_flow_target(&Tensor::zeros([4, 3]), &mut rng(seed)).unwrap();
        prop_assert!((0.0..=1.0).contains(&ft.tau));
        // with a1 = 0 the target is just -a0 and a_tau = (1 - tau) a0
        for (a, v) in ft.a_tau.data().iter().zip(ft.v_star.data()) {
            prop_assert!((a + (1.0 - ft.tau) * v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_grad_on_random_widths(width in 2usize..10, seed in any::<u64>()) {
        let x = Tensor::uniform([3, width], -2.0, 2.0, &mut rng(seed));
        let w = Tensor::uniform([3, width], -1.0, 1.0, &mut rng(seed ^ 1));
        let err = grad_check(|g, v| {
            let y = g.layer_norm(v, None, None, 1e-5)?;
            let c = g.constant(w.clone());
            let yw = g.mul(y, c)?;
            Ok(g.sum(yw))
        }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn cosine_bounded(a in prop::collection::vec(-4.0f64..4.0, 8), b in prop::collection::vec(-4.0f64..4.0, 8)) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[2, 4], a));
        let y = g.constant(tensor(&[2, 4], b));
        let c = g.cosine_similarity(x, y).unwrap();
        prop_assert!(g.data(c).iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }
}
