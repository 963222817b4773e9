//! Losses against independently written scalar oracles.

mod common;

use candle_core::{Device, Tensor};
use common::*;
use glimpse::losses::{dense_l1_loss, dice_loss, focal_loss, hungarian_match, patch_mse_loss, seg_align_loss};
use rand::Rng;

fn scalar(t: Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

#[test]
fn hungarian_matches_enumeration() {
    let mut r = rng(1);
    for trial in 0..2000 {
        let (k, m) = (r.random_range(1..=6), r.random_range(1..=6));
        // small integer costs force many ties
        let cost: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..m).map(|_| r.random_range(0..4) as f64).collect())
            .collect();
        let a = hungarian_match(&cost).unwrap();
        let (best, pairs) = brute_assignment(&cost);
        assert_eq!(a.cost, best, "trial {trial}: {cost:?}");
        assert_eq!(a.pairs, pairs, "trial {trial}: {cost:?}");
    }
}

#[test]
fn hungarian_real_valued() {
    let mut r = rng(2);
    for _ in 0..500 {
        let (k, m) = (r.random_range(1..=6), r.random_range(1..=6));
        let cost: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut r, m, 0.0, 10.0)).collect();
        let a = hungarian_match(&cost).unwrap();
        assert!((a.cost - brute_assignment(&cost).0).abs() < 1e-9);
        assert_eq!(a.pairs.len(), k.min(m));
    }
}

#[test]
fn mask_losses_match_scalar_formulas() {
    let mut r = rng(3);
    let dev = Device::Cpu;
    for _ in 0..200 {
        let n = r.random_range(1..40);
        let logit = random_vec(&mut r, n, -6.0, 6.0);
        let gt: Vec<f64> = (0..n).map(|_| r.random_range(0..2) as f64).collect();
        let prob: Vec<f64> = logit.iter().map(|&x| sigmoid(x)).collect();
        let (lt, gtt, pt) = (
            Tensor::new(logit.as_slice(), &dev).unwrap(),
            Tensor::new(gt.as_slice(), &dev).unwrap(),
            Tensor::new(prob.as_slice(), &dev).unwrap(),
        );
        let d = scalar(dice_loss(&pt, &gtt).unwrap());
        assert!((d - dice_ref(&prob, &gt)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&d));
        let f = scalar(focal_loss(&lt, &gtt).unwrap());
        assert!((f - focal_ref(&logit, &gt)).abs() < 1e-12);
        assert!(f >= 0.0);

        let l1: f64 = prob.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        assert!((scalar(dense_l1_loss(&pt, &gtt).unwrap()) - l1).abs() < 1e-12);
        let mse: f64 = logit.iter().zip(&gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        assert!((scalar(patch_mse_loss(&lt, &gtt).unwrap()) - mse).abs() < 1e-12);
    }
}

#[test]
fn seg_loss_matches_enumerated_matchings() {
    let mut r = rng(4);
    let dev = Device::Cpu;
    let px = 64;
    for trial in 0..100 {
        let n = if trial == 0 { 3 } else { r.random_range(1..=4) };
        let m = if trial == 0 { 2 } else { r.random_range(0..=5) };
        let pred: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, px, -4.0, 4.0)).collect();
        let gt: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..px).map(|_| r.random_range(0..2) as f64).collect())
            .collect();
        let pt = Tensor::from_vec(pred.concat(), (n, px), &dev).unwrap();
        let gtt = (m > 0).then(|| Tensor::from_vec(gt.concat(), (m, px), &dev).unwrap());
        let got = scalar(seg_align_loss(&pt, gtt.as_ref()).unwrap());
        let want = seg_ref(&pred, &gt);
        assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    for (name, err) in worst_gradcheck_errors(10, 5) {
        assert!(err <= 1e-4, "{name}: relative error {err:.2e}");
    }
}
