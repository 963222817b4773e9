//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Exhaustive optimum over all matchings of `min(K, M)` pairs, with the
/// lexicographically smallest optimal pair list.
pub fn brute_assignment(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    fn rec(
        cost: &[Vec<f64>],
        r: usize,
        used: &mut [bool],
        left: usize,
        cur: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if left == 0 {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        if cost.len() - r < left {
            return;
        }
        // columns ascending before "unmatched" gives lexicographic order
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cur.push((r, c));
                rec(cost, r + 1, used, left - 1, cur, acc + cost[r][c], best);
                cur.pop();
                used[c] = false;
            }
        }
        rec(cost, r + 1, used, left, cur, acc, best);
    }
    let m = cost[0].len();
    let mut best = None;
    rec(cost, 0, &mut vec![false; m], cost.len().min(m), &mut Vec::new(), 0.0, &mut best);
    best.unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dice with smoothing 1, written out per pixel.
pub fn dice_ref(prob: &[f64], gt: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..prob.len() {
        inter += prob[i] * gt[i];
        sp += prob[i];
        sg += gt[i];
    }
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Focal loss with gamma 2 and alpha 0.25, from probabilities.
pub fn focal_ref(logit: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..logit.len() {
        let p = sigmoid(logit[i]);
        let (pt, at) = if gt[i] > 0.5 { (p, 0.25) } else { (1.0 - p, 0.75) };
        s += -at * (1.0 - pt).powi(2) * pt.ln();
    }
    s / logit.len() as f64
}

/// Matched segmentation loss from scalar formulas and exhaustive matching.
pub fn seg_ref(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    let empty = vec![0.0; pred[0].len()];
    if gt.is_empty() {
        return pred.iter().map(|p| focal_ref(p, &empty)).sum::<f64>() / pred.len() as f64;
    }
    let cost: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| {
            let prob: Vec<f64> = p.iter().map(|&x| sigmoid(x)).collect();
            gt.iter().map(|g| dice_ref(&prob, g) + focal_ref(p, g)).collect()
        })
        .collect();
    let (total, pairs) = brute_assignment(&cost);
    let mut loss = total / pairs.len() as f64;
    let free: Vec<usize> = (0..pred.len()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    if !free.is_empty() {
        loss += free.iter().map(|&i| focal_ref(&pred[i], &empty)).sum::<f64>() / free.len() as f64;
    }
    loss + (gt.len() - pairs.len()) as f64
}

/// Max-norm relative error between autograd and central differences of a
/// scalar function at `x`, step `1e-5`.
pub fn gradcheck(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_slice(x, shape, &dev).unwrap()).unwrap();
    let out = f(var.as_tensor());
    let grads = out.backward().unwrap();
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
        None => vec![0.0; x.len()],
    };
    let eval = |v: &[f64]| -> f64 {
        f(&Tensor::from_slice(v, shape, &dev).unwrap()).to_scalar::<f64>().unwrap()
    };
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = eval(&probe);
        probe[i] = x[i] - h;
        let down = eval(&probe);
        probe[i] = x[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Like [`gradcheck`], for a parameter already held in a `Var`.
pub fn gradcheck_var(var: &Var, f: impl Fn() -> Tensor) -> f64 {
    let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let shape = var.as_tensor().dims().to_vec();
    let set = |v: &[f64]| var.set(&Tensor::from_slice(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
    let grads = f().backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        set(&probe);
        let up = f().to_scalar::<f64>().unwrap();
        probe[i] = base[i] - h;
        set(&probe);
        let down = f().to_scalar::<f64>().unwrap();
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }
    set(&base);
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
}

/// Worst gradient-check error per differentiable loss and head over
/// `instances` random inputs.
pub fn worst_gradcheck_errors(instances: usize, seed: u64) -> Vec<(String, f64)> {
    use glimpse::grammar::ExpertKind;
    use glimpse::losses::{dense_l1_loss, dice_loss, focal_loss, patch_mse_loss, seg_align_loss};
    use glimpse::projection::{init_head, HeadDims};

    let dev = Device::Cpu;
    let mut r = rng(seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name.to_string(), e)),
    };
    let px = 16;
    for _ in 0..instances {
        let gt = Tensor::from_vec(binary(&mut r, px), px, &dev).unwrap();
        let x = random_vec(&mut r, px, -3.0, 3.0);
        record(
            "dice",
            gradcheck(&x, &[px], |t| dice_loss(&candle_nn::ops::sigmoid(t).unwrap(), &gt).unwrap()),
        );
        record("focal", gradcheck(&x, &[px], |t| focal_loss(t, &gt).unwrap()));
        let dense = Tensor::from_vec(random_vec(&mut r, px, 0.0, 1.0), px, &dev).unwrap();
        record("l1", gradcheck(&x, &[px], |t| dense_l1_loss(t, &dense).unwrap()));
        let patch = Tensor::from_vec(random_vec(&mut r, px, -1.0, 1.0), (4, 4), &dev).unwrap();
        record("mse", gradcheck(&x, &[4, 4], |t| patch_mse_loss(t, &patch).unwrap()));

        let (n, m) = (3, r.random_range(0..=4usize));
        let masks: Vec<f64> = (0..m).flat_map(|_| binary(&mut r, px)).collect();
        let masks = (m > 0).then(|| Tensor::from_vec(masks, (m, px), &dev).unwrap());
        let logits = random_vec(&mut r, n * px, -3.0, 3.0);
        record(
            "seg_align",
            gradcheck(&logits, &[n, px], |t| seg_align_loss(t, masks.as_ref()).unwrap()),
        );

        let dims = HeadDims {
            d: 8,
            grid_size: 4,
            patch_grid: 2,
            d_patch: 3,
            slots: 4,
        };
        for e in ExpertKind::ALL {
            let head = init_head(e, dims, r.random(), candle_core::DType::F64, &dev).unwrap();
            let shape = dims.output_shape(e);
            let count: usize = shape.iter().product();
            let probe = Tensor::from_vec(random_vec(&mut r, count, -1.0, 1.0), shape.as_slice(), &dev).unwrap();
            let block = random_vec(&mut r, dims.slots * dims.d, -1.0, 1.0);
            let scalar = |v: &Tensor| (v * &probe).unwrap().sum_all().unwrap();
            record(
                &format!("head_{e}"),
                gradcheck(&block, &[dims.slots, dims.d], |t| scalar(&head.project(t).unwrap().values)),
            );
            let fixed = Tensor::from_vec(block, (dims.slots, dims.d), &dev).unwrap();
            for (_, var) in head.params() {
                record(
                    &format!("head_{e}_params"),
                    gradcheck_var(var, || scalar(&head.project(&fixed).unwrap().values)),
                );
            }
        }
    }
    worst
}
