use candle_core::Tensor;

use super::mask::same_shape;
use crate::error::Result;

/// Mean absolute difference; the depth and edge alignment loss.
pub fn dense_l1_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "l1")?;
    Ok((pred - gt)?.abs()?.mean_all()?)
}

/// Mean squared error over every entry; the patch alignment loss.
pub fn patch_mse_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "mse")?;
    Ok((pred - gt)?.sqr()?.mean_all()?)
}
