mod support;

use candle_core::{DType, Device, Tensor, Var};
use mmcd_model::decoder::{hard_threshold, pseudo_probs, soft_threshold, soft_threshold_grad, soft_threshold_tensor, SWEEP_TEMPERATURES};
use mmcd_model::objective::{
    compute_losses, consistency, mse_height, one_hot, total_loss, weighted_ce_logits, weighted_ce_probs, ClassWeights,
    LossWeights, Targets,
};
use mmcd_model::ModelOutputs;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{soft_threshold_fd, values};

#[test]
fn soft_threshold_reference_values() {
    assert_eq!(soft_threshold(0.0, 0.5).unwrap(), 0.0);
    assert!((soft_threshold(0.5, 1.0).unwrap() - 0.244919).abs() < 1e-6);
    assert!((soft_threshold(1.0, 1.0).unwrap() - 0.462117).abs() < 1e-6);
    assert!((soft_threshold(-3.0, 0.5).unwrap() + 0.995055).abs() < 1e-6);
    assert!(soft_threshold(1.0, 0.0).is_err());
    assert!(soft_threshold(1.0, -1.0).is_err());
}

#[test]
fn soft_threshold_is_odd_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &t in &[1e-3, 0.05, 0.5, 2.0] {
        let mut xs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-5.0..5.0)).collect();
        for &x in &xs {
            assert_eq!(soft_threshold(-x, t).unwrap(), -soft_threshold(x, t).unwrap());
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ys: Vec<f64> = xs.iter().map(|&x| soft_threshold(x, t).unwrap()).collect();
        assert!(ys.windows(2).all(|p| p[0] <= p[1]), "t = {t}");
    }
}

#[test]
fn low_temperature_approaches_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10_000 {
        let mag = rng.gen_range(0.1..100.0);
        let x = if rng.gen_bool(0.5) { mag } else { -mag };
        assert!((soft_threshold(x, 1e-3).unwrap() - hard_threshold(x)).abs() <= 1e-6);
    }
    assert_eq!(hard_threshold(0.0), 0.0);
}

#[test]
fn gradient_matches_tail_stencil() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &t in SWEEP_TEMPERATURES.iter().chain(&[1e-3, 3.0]) {
        for _ in 0..2000 {
            let x = rng.gen_range(-20.0..20.0) * t;
            let a = soft_threshold_grad(x, t).unwrap();
            let n = soft_threshold_fd(x, t);
            assert!((a - n).abs() <= 1e-6 * a.abs(), "t={t} x={x}: {a} vs {n}");
        }
    }
}

#[test]
fn tensor_version_and_autograd_agree_with_scalar() {
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
    let v = Var::from_vec(xs.clone(), xs.len(), &Device::Cpu).unwrap();
    let y = soft_threshold_tensor(v.as_tensor(), 0.5).unwrap();
    let g = y.sum_all().unwrap().backward().unwrap();
    let gv = values(g.get(v.as_tensor()).unwrap());
    for (i, &x) in xs.iter().enumerate() {
        assert!((values(&y)[i] - soft_threshold(x, 0.5).unwrap()).abs() < 1e-15);
        assert!((gv[i] - soft_threshold_grad(x, 0.5).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn pseudo_probabilities_lie_on_the_simplex(s in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
        let n = s.len();
        let p = values(&pseudo_probs(&Tensor::from_vec(s.clone(), (1, 1, 1, n), &Device::Cpu).unwrap()).unwrap());
        for i in 0..n {
            let (u, pos, neg) = (p[i], p[n + i], p[2 * n + i]);
            prop_assert!(u >= 0.0 && pos >= 0.0 && neg >= 0.0);
            prop_assert!((u + pos + neg - 1.0).abs() < 1e-12);
            prop_assert!(pos == 0.0 || neg == 0.0);
            prop_assert_eq!(pos > 0.0, s[i] > 0.0);
        }
    }
}

fn labels(v: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, h, w), &Device::Cpu).unwrap()
}

#[test]
fn weighted_cross_entropy_examples() {
    let cw = ClassWeights::default();
    let logits = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
    let l0 = weighted_ce_logits(&logits, &labels(&[0], 1, 1), &cw).unwrap().to_scalar::<f64>().unwrap();
    assert!((l0 - 0.054931).abs() < 1e-6);
    let l1 = weighted_ce_logits(&logits, &labels(&[1], 1, 1), &cw).unwrap().to_scalar::<f64>().unwrap();
    assert!((l1 - 0.95 * 3f64.ln()).abs() < 1e-12);

    let probs = Tensor::from_vec(vec![0.2f64, 0.5, 0.3], (1, 3, 1, 1), &Device::Cpu).unwrap();
    let lp = weighted_ce_probs(&probs, &labels(&[2], 1, 1), &cw).unwrap().to_scalar::<f64>().unwrap();
    assert!((lp - 0.95 * -(0.3f64.ln())).abs() < 1e-12);
    // a zero probability is floored instead of producing infinity
    let hard = Tensor::from_vec(vec![1.0f64, 0.0, 0.0], (1, 3, 1, 1), &Device::Cpu).unwrap();
    let lh = weighted_ce_probs(&hard, &labels(&[1], 1, 1), &cw).unwrap().to_scalar::<f64>().unwrap();
    assert!((lh - 0.95 * -(1e-7f64.ln())).abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (5, 7);
    let lg: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let lb: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
    let cw = ClassWeights::default().as_array();
    let mut expected = 0.0;
    for p in 0..h * w {
        let z: f64 = (0..3).map(|c| lg[c * h * w + p].exp()).sum();
        let c = lb[p] as usize;
        expected += cw[c] * -(lg[c * h * w + p].exp() / z).ln();
    }
    expected /= (h * w) as f64;
    let logits = Tensor::from_vec(lg, (1, 3, h, w), &Device::Cpu).unwrap();
    let got = weighted_ce_logits(&logits, &labels(&lb, h, w), &ClassWeights::default()).unwrap();
    assert!((got.to_scalar::<f64>().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn one_hot_rejects_out_of_range_labels() {
    assert!(one_hot(&labels(&[0, 3], 1, 2), DType::F32).is_err());
    let oh = one_hot(&labels(&[2, 0], 1, 2), DType::F64).unwrap();
    assert_eq!(values(&oh), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn height_mse_example() {
    let p = Tensor::full(0.5f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
    let g = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(mse_height(&p, &g).unwrap().to_scalar::<f64>().unwrap(), 0.25);
    assert!(mse_height(&p, &g.reshape((1, 1, 4, 1)).unwrap()).is_err());
}

fn probs(v: &[[f64; 3]]) -> Tensor {
    let n = v.len();
    let flat: Vec<f64> = (0..3).flat_map(|c| v.iter().map(move |p| p[c])).collect();
    Tensor::from_vec(flat, (1, 3, 1, n), &Device::Cpu).unwrap()
}

fn mask(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, 1, 1, v.len()), &Device::Cpu).unwrap()
}

#[test]
fn consistency_pairs_signs_with_classes() {
    // pseudo "positive" against semantic "demolished": full disagreement
    let pseudo = probs(&[[0.0, 1.0, 0.0]]);
    let sem = probs(&[[0.0, 1.0, 0.0]]);
    assert_eq!(consistency(&pseudo, &sem, &mask(&[1.0])).unwrap().to_scalar::<f64>().unwrap(), 2.0);
    // pseudo "positive" against semantic "newly built": agreement
    let sem = probs(&[[0.0, 0.0, 1.0]]);
    assert_eq!(consistency(&pseudo, &sem, &mask(&[1.0])).unwrap().to_scalar::<f64>().unwrap(), 0.0);
}

#[test]
fn consistency_vanishes_for_identical_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sem: Vec<[f64; 3]> = (0..64)
        .map(|_| {
            let a: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let z: f64 = a.iter().sum();
            [a[0] / z, a[1] / z, a[2] / z]
        })
        .collect();
    let pseudo: Vec<[f64; 3]> = sem.iter().map(|p| [p[0], p[2], p[1]]).collect();
    let m: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let c = consistency(&probs(&pseudo), &probs(&sem), &mask(&m)).unwrap();
    assert_eq!(c.to_scalar::<f64>().unwrap(), 0.0);
    let empty = consistency(&probs(&[[0.0, 1.0, 0.0]]), &probs(&[[1.0, 0.0, 0.0]]), &mask(&[0.0])).unwrap();
    assert_eq!(empty.to_scalar::<f64>().unwrap(), 0.0);
}

#[test]
fn consistency_averages_over_the_overlap_only() {
    let pseudo = probs(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]]);
    let sem = probs(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.0, 0.5]]);
    let c = consistency(&pseudo, &sem, &mask(&[1.0, 0.0, 1.0])).unwrap().to_scalar::<f64>().unwrap();
    assert!((c - (2.0 + 0.0) / 2.0).abs() < 1e-15);
}

#[test]
fn total_loss_weighting() {
    let lw = LossWeights::default();
    assert!((total_loss(Some(1.0), Some(2.0), Some(3.0), &lw).unwrap() - 2.4).abs() < 1e-12);
    assert!((total_loss(None, Some(2.0), None, &lw).unwrap() - 0.4).abs() < 1e-12);
    assert!(total_loss(Some(f64::NAN), None, None, &lw).is_err());
    assert!(LossWeights { lambda1: -0.1, lambda2: 0.5, lambda3: 0.6 }.validate().is_err());
}

fn outputs_and_targets() -> (ModelOutputs, Targets) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w) = (4, 4);
    let s = support::random_tensor(&mut rng, &[1, 1, h, w], -0.9, 0.9);
    let outputs = ModelOutputs {
        sem_logits: Some(support::random_tensor(&mut rng, &[1, 3, h, w], -2.0, 2.0)),
        height_norm: Some(support::random_tensor(&mut rng, &[1, 1, h, w], -1.0, 1.0)),
        pseudo_probs: Some(pseudo_probs(&s).unwrap()),
        pseudo_scalar: Some(s),
    };
    let sem: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
    let targets = Targets {
        semantic: labels(&sem, h, w),
        pseudo: labels(&sem, h, w),
        height_norm: support::random_tensor(&mut rng, &[1, 1, h, w], -1.0, 1.0),
        overlap: Tensor::ones((1, 1, h, w), DType::F64, &Device::Cpu).unwrap(),
    };
    (outputs, targets)
}

#[test]
fn composite_loss_combines_present_terms() {
    let (outputs, targets) = outputs_and_targets();
    let lw = LossWeights::default();
    let cw = ClassWeights::default();
    let t = compute_losses(&outputs, &targets, &lw, &cw, 0.0).unwrap();
    let s = |x: &Option<Tensor>| x.as_ref().unwrap().to_scalar::<f64>().unwrap();
    let expected = total_loss(Some(s(&t.pseudo)), Some(s(&t.height)), Some(s(&t.semantic)), &lw).unwrap();
    assert!((t.total.to_scalar::<f64>().unwrap() - expected).abs() < 1e-12);
    assert!(t.consistency.is_some());

    let with_mu = compute_losses(&outputs, &targets, &lw, &cw, 0.5).unwrap();
    assert!((with_mu.total.to_scalar::<f64>().unwrap() - expected - 0.5 * s(&t.consistency)).abs() < 1e-12);

    let only_height = ModelOutputs { sem_logits: None, pseudo_scalar: None, pseudo_probs: None, ..outputs };
    let t = compute_losses(&only_height, &targets, &lw, &cw, 0.0).unwrap();
    assert!(t.semantic.is_none() && t.pseudo.is_none() && t.consistency.is_none());
    assert!((t.total.to_scalar::<f64>().unwrap() - 0.2 * s(&t.height)).abs() < 1e-12);
}
