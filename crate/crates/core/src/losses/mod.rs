//! Training objective: expert alignment losses, the decision-token penalty,
//! and the min-over-paths sample loss.

mod dense;
mod hungarian;
mod mask;
mod objective;

pub use dense::{dense_l1_loss, patch_mse_loss};
pub use hungarian::{hungarian_match, Assignment};
pub use mask::{
    dice_loss, focal_loss, seg_align_loss, seg_cost_matrix, softplus, DICE_SMOOTH, FOCAL_ALPHA,
    FOCAL_GAMMA, UNMATCHED_GT_PENALTY,
};
pub use objective::{
    alignment_loss, sample_loss, sparsity_penalty, visual_loss, LossBreakdown, LossWeights,
    TargetTensors, VisualLoss,
};
