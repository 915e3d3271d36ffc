use approx::assert_abs_diff_eq;
use elastic_moe::moe::{
    gate_and_combine, ideal_forward, model_forward, router_logits, top_k_select, Expert, Model, ModelShape, MoeLayer,
    RouteMode,
};
use elastic_moe::numcore::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layer(d: usize, n: usize, seed: u64) -> MoeLayer {
    MoeLayer::init(d, 5, n, 0, seed, 0).unwrap()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum::<f64>())
        .collect()
}

fn expert_oracle(e: &Expert, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(x, &e.up.weight, &e.up.bias).into_iter().map(|v| v.max(0.0)).collect();
    affine(&h, &e.down.weight, &e.down.bias)
}

fn random_x(seed: u64, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::vector(&(0..d).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>()).unwrap()
}

#[test]
fn zero_router_gives_zero_logits() {
    let mut l = layer(3, 4, 1);
    l.router = Tensor::zeros(&[3, 4]);
    let logits = router_logits(&Tensor::filled(&[2, 3], 0.4).unwrap(), &l).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn basis_vector_selects_router_row() {
    let mut l = layer(2, 3, 1);
    l.router = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let logits = router_logits(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &l).unwrap();
    assert_eq!(logits.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn router_logits_match_naive_product() {
    let l = layer(6, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![4, 6], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let got = router_logits(&x, &l).unwrap();
    for r in 0..4 {
        for c in 0..5 {
            let want: f64 = (0..6).map(|i| x.at(r, i) * l.router.at(i, c)).sum();
            assert_abs_diff_eq!(got.at(r, c), want, epsilon = 1e-12);
        }
    }
    assert!(router_logits(&Tensor::zeros(&[1, 5]), &l).is_err());
}

#[test]
fn top_k_examples() {
    assert_eq!(top_k_select(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
    assert_eq!(top_k_select(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
    assert_eq!(top_k_select(&[0.3, -1.0, 2.0, 0.1], 4).unwrap(), vec![0, 1, 2, 3]);
    assert!(top_k_select(&[1.0, 2.0], 0).is_err());
    assert!(top_k_select(&[1.0, 2.0], 3).is_err());
}

#[test]
fn singleton_selection_returns_the_expert() {
    let l = layer(4, 3, 7);
    let x = random_x(1, 4);
    let (y, w) = gate_and_combine(&x, &[1], &[0.2, -0.4, 1.0], &l).unwrap();
    assert_eq!(w, vec![1.0]);
    for (a, b) in y.data().iter().zip(expert_oracle(&l.experts[1], x.data())) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn equal_logits_average_two_experts() {
    let l = layer(4, 3, 8);
    let x = random_x(2, 4);
    let (y, w) = gate_and_combine(&x, &[0, 2], &[0.7, -3.0, 0.7], &l).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
    let (a, b) = (expert_oracle(&l.experts[0], x.data()), expert_oracle(&l.experts[2], x.data()));
    for (i, v) in y.data().iter().enumerate() {
        assert_abs_diff_eq!(*v, 0.5 * (a[i] + b[i]), epsilon = 1e-12);
    }
}

#[test]
fn three_way_gate_matches_softmax_oracle() {
    let l = layer(4, 4, 9);
    let x = random_x(3, 4);
    let (y, w) = gate_and_combine(&x, &[0, 1, 3], &[1.0, 2.0, -5.0, 3.0], &l).unwrap();
    let oracle = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953];
    for (a, b) in w.iter().zip(oracle) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    let mut want = vec![0.0; 4];
    for (&e, g) in [0, 1, 3].iter().zip(&w) {
        for (acc, v) in want.iter_mut().zip(expert_oracle(&l.experts[e], x.data())) {
            *acc += g * v;
        }
    }
    for (a, b) in y.data().iter().zip(want) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn gate_rejects_bad_selections() {
    let l = layer(4, 3, 1);
    let x = random_x(0, 4);
    assert!(gate_and_combine(&x, &[], &[0.0; 3], &l).is_err());
    assert!(gate_and_combine(&x, &[1, 1], &[0.0; 3], &l).is_err());
    assert!(gate_and_combine(&x, &[3], &[0.0; 3], &l).is_err());
}

#[test]
fn ideal_forward_special_cases() {
    let l = layer(5, 6, 12);
    let x = random_x(5, 5);
    let logits = router_logits(&x.reshape(vec![1, 5]).unwrap(), &l).unwrap();
    for k in 1..=6 {
        let top = top_k_select(logits.data(), k).unwrap();
        let (via_topk, _) = gate_and_combine(&x, &top, logits.data(), &l).unwrap();
        assert_eq!(ideal_forward(&x, k, &l).unwrap(), via_topk, "k = {k}");
    }
    // dense mixture over every expert
    let probs: Vec<f64> = {
        let m = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.data().iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let mut dense = vec![0.0; 5];
    for (e, p) in l.experts.iter().zip(&probs) {
        for (acc, v) in dense.iter_mut().zip(expert_oracle(e, x.data())) {
            *acc += p * v;
        }
    }
    for (a, b) in ideal_forward(&x, 6, &l).unwrap().data().iter().zip(dense) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

fn tiny_shape(n_layers: usize, n: usize) -> ModelShape {
    ModelShape {
        d_in: 3,
        d: 4,
        d_h: 5,
        n_layers,
        n_experts: n,
        n_classes: 3,
        n_null: 0,
    }
}

#[test]
fn single_block_top1_composes_by_hand() {
    let model = Model::init(tiny_shape(1, 2), 21).unwrap();
    let batch = Tensor::from_rows(&[vec![0.3, -0.2, 1.1], vec![-1.0, 0.5, 0.0]]).unwrap();
    let out = model_forward(&batch, &RouteMode::TopK(1), &model).unwrap();
    for t in 0..2 {
        let h = affine(batch.row(t), &model.input.weight, &model.input.bias);
        let l = &model.blocks[0];
        let logits = router_logits(&Tensor::new(vec![1, 4], h.clone()).unwrap(), l).unwrap();
        let e = top_k_select(logits.data(), 1).unwrap()[0];
        assert_eq!(out.records[0][t].selected, vec![e]);
        let y: Vec<f64> = h.iter().zip(expert_oracle(&l.experts[e], &h)).map(|(a, b)| a + b).collect();
        let want = affine(&y, &model.head.weight, &model.head.bias);
        for (a, b) in out.logits.row(t).iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }
    assert_eq!(out.stats.invocations, 2);
}

#[test]
fn full_top_k_matches_ideal_forward_per_token() {
    let model = Model::init(tiny_shape(1, 4), 5).unwrap();
    let batch = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap();
    let out = model_forward(&batch, &RouteMode::TopK(4), &model).unwrap();
    for t in 0..2 {
        let h = Tensor::vector(&affine(batch.row(t), &model.input.weight, &model.input.bias)).unwrap();
        let moe = ideal_forward(&h, 4, &model.blocks[0]).unwrap();
        let y: Vec<f64> = h.data().iter().zip(moe.data()).map(|(a, b)| a + b).collect();
        let want = affine(&y, &model.head.weight, &model.head.bias);
        for (a, b) in out.logits.row(t).iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn seeded_forward_is_bit_identical() {
    let model = Model::init(tiny_shape(2, 6), 77).unwrap();
    let batch = Tensor::new(vec![8, 3], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mode = RouteMode::Emoe {
        cfg: elastic_moe::elastic::ElasticConfig::new(2, 4),
        seed: 9,
        step: 3,
    };
    let a = model_forward(&batch, &mode, &model).unwrap();
    let b = model_forward(&batch, &mode, &model).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 2);
    assert!(a.records.iter().all(|l| l.len() == 8));
}

#[test]
fn invalid_modes_are_rejected() {
    let model = Model::init(tiny_shape(1, 4), 1).unwrap();
    let batch = Tensor::zeros(&[1, 3]);
    assert!(model_forward(&batch, &RouteMode::TopK(5), &model).is_err());
    assert!(model_forward(&batch, &RouteMode::TopP(0.0), &model).is_err());
    assert!(model_forward(&batch, &RouteMode::AdaMoe { k_nominal: 2 }, &model).is_err());
    assert!(model_forward(&Tensor::zeros(&[1, 2]), &RouteMode::TopK(1), &model).is_err());
}

proptest! {
    #[test]
    fn top_k_sets_are_nested(logits in prop::collection::vec(-5.0f64..5.0, 2..20)) {
        for k in 1..logits.len() {
            let a = top_k_select(&logits, k).unwrap();
            let b = top_k_select(&logits, k + 1).unwrap();
            prop_assert!(a.iter().all(|i| b.contains(i)));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn shift_leaves_selection_and_gates_unchanged(
        logits in prop::collection::vec(-5.0f64..5.0, 3..10),
        c in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let n = logits.len();
        let l = layer(3, n, seed);
        let x = random_x(seed, 3);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let k = 1 + (seed as usize % (n - 1));
        let s1 = top_k_select(&logits, k).unwrap();
        prop_assert_eq!(&s1, &top_k_select(&shifted, k).unwrap());
        let (_, w1) = gate_and_combine(&x, &s1, &logits, &l).unwrap();
        let (_, w2) = gate_and_combine(&x, &s1, &shifted, &l).unwrap();
        for (a, b) in w1.iter().zip(w2) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        prop_assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
