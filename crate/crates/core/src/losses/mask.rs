//! Mask losses and the matched segmentation loss.

use candle_core::{Tensor, D};

use super::hungarian::hungarian_match;
use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Added once per ground-truth mask left without a prediction.
pub const UNMATCHED_GT_PENALTY: f64 = 1.0;

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Dice loss reduced over the last axis; broadcasting inputs give a cost grid.
fn dice_last(prob: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let inter = prob.broadcast_mul(gt)?.sum(D::Minus1)?;
    let denom = prob.sum(D::Minus1)?.broadcast_add(&gt.sum(D::Minus1)?)?;
    let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&(denom + DICE_SMOOTH)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Sigmoid focal loss averaged over the last axis.
///
/// With `z = x (2g - 1)`, `-log p_t = softplus(-z)` and
/// `(1 - p_t)^2 = exp(-2 softplus(z))`, which stays finite for any logit.
fn focal_last(logit: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let sign = gt.affine(2.0, -1.0)?;
    let z = logit.broadcast_mul(&sign)?;
    let nll = softplus(&z.neg()?)?;
    let modulation = (softplus(&z)? * -FOCAL_GAMMA)?.exp()?;
    // alpha on positives, 1 - alpha on negatives
    let alpha_t = gt.affine(2.0 * FOCAL_ALPHA - 1.0, 1.0 - FOCAL_ALPHA)?;
    let per_px = alpha_t.broadcast_mul(&(modulation * nll)?)?;
    Ok(per_px.mean(D::Minus1)?)
}

/// `1 - (2 Σ p g + 1) / (Σ p + Σ g + 1)` for a probability map and binary target.
pub fn dice_loss(pred_prob: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred_prob, gt, "dice")?;
    dice_last(&pred_prob.flatten_all()?, &gt.flatten_all()?)
}

/// Mean per-pixel `-α_t (1 - p_t)^2 log p_t` with `α = 0.25`.
pub fn focal_loss(pred_logit: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred_logit, gt, "focal")?;
    focal_last(&pred_logit.flatten_all()?, &gt.flatten_all()?)
}

/// Pairwise dice + focal costs between `[N, P]` logits and `[M, P]` masks.
pub fn seg_cost_matrix(pred_logits: &Tensor, gt_masks: &Tensor) -> Result<Tensor> {
    let (_, p) = pred_logits.dims2()?;
    let (_, pg) = gt_masks.dims2()?;
    if p != pg {
        return Err(Error::ShapeMismatch(format!("seg maps of {p} vs {pg} pixels")));
    }
    let logits = pred_logits.unsqueeze(1)?;
    let gt = gt_masks.unsqueeze(0)?;
    let dice = dice_last(&candle_nn::ops::sigmoid(&logits)?, &gt)?;
    let focal = focal_last(&logits, &gt)?;
    Ok((dice + focal)?)
}

/// Set loss between `N` predicted mask logits `[N, P]` and `M` target masks.
///
/// Costs are matched with [`hungarian_match`] on detached values; the loss is
/// the mean matched cost, plus the mean focal loss of unmatched predictions
/// against an empty mask, plus [`UNMATCHED_GT_PENALTY`] per unmatched target.
/// `gt_masks` is `None` when the scene has no visible objects.
pub fn seg_align_loss(pred_logits: &Tensor, gt_masks: Option<&Tensor>) -> Result<Tensor> {
    let (n, p) = pred_logits.dims2()?;
    let unmatched_focal = |rows: &[usize]| -> Result<Option<Tensor>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let idx = Tensor::new(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), pred_logits.device())?;
        let sel = pred_logits.index_select(&idx, 0)?;
        let empty = sel.zeros_like()?;
        Ok(Some(focal_last(&sel, &empty)?.mean_all()?))
    };

    let gt = match gt_masks {
        Some(gt) if gt.dim(0)? > 0 => gt,
        _ => {
            let rows: Vec<usize> = (0..n).collect();
            return unmatched_focal(&rows)?.ok_or_else(|| Error::ShapeMismatch("no predicted masks".into()));
        }
    };
    let (m, pg) = gt.dims2()?;
    if p != pg {
        return Err(Error::ShapeMismatch(format!("seg maps of {p} vs {pg} pixels")));
    }
    let cost = seg_cost_matrix(pred_logits, gt)?;
    let values: Vec<Vec<f64>> = cost.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    let assignment = hungarian_match(&values)?;

    let flat_idx: Vec<u32> = assignment.pairs.iter().map(|&(i, j)| (i * m + j) as u32).collect();
    let flat_idx = Tensor::new(flat_idx, pred_logits.device())?;
    let mut loss = cost.flatten_all()?.index_select(&flat_idx, 0)?.mean_all()?;

    let matched_rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let free_rows: Vec<usize> = (0..n).filter(|i| !matched_rows.contains(i)).collect();
    if let Some(extra) = unmatched_focal(&free_rows)? {
        loss = (loss + extra)?;
    }
    let missed = m - assignment.pairs.len();
    if missed > 0 {
        loss = (loss + missed as f64 * UNMATCHED_GT_PENALTY)?;
    }
    Ok(loss)
}
