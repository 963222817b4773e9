//! Per-path objective: cross-entropy, weighted alignment terms, and the
//! decision-token penalty, plus the minimum over a sample's paths.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::dense::{dense_l1_loss, patch_mse_loss};
use super::mask::seg_align_loss;
use crate::error::{Error, Result};
use crate::grammar::{ExpertKind, SequenceLayout};
use crate::projection::ExpertPrediction;
use crate::world::ExpertFeatureBundle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_depth: f64,
    pub lambda_edge: f64,
    pub lambda_patch: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::stage1()
    }
}

impl LossWeights {
    pub fn stage1() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_depth: 1.0,
            lambda_edge: 1.0,
            lambda_patch: 1.0,
            gamma: 1.0,
            eta: 0.0,
        }
    }

    pub fn stage2() -> Self {
        Self { eta: 0.1, ..Self::stage1() }
    }

    pub fn lambda(&self, expert: ExpertKind) -> f64 {
        match expert {
            ExpertKind::Seg => self.lambda_seg,
            ExpertKind::Depth => self.lambda_depth,
            ExpertKind::Edge => self.lambda_edge,
            ExpertKind::Patch => self.lambda_patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_seg", self.lambda_seg),
            ("lambda_depth", self.lambda_depth),
            ("lambda_edge", self.lambda_edge),
            ("lambda_patch", self.lambda_patch),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss components of one teacher-forced path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub vis_terms: BTreeMap<ExpertKind, f64>,
    pub vis_total: f64,
    pub penalty: f64,
    pub combined: f64,
}

impl LossBreakdown {
    /// Assembles a breakdown; the totals are derived so the invariants hold.
    pub fn new(ce: f64, vis_terms: BTreeMap<ExpertKind, f64>, penalty: f64, w: &LossWeights) -> Result<Self> {
        let vis_total = vis_terms.iter().map(|(e, v)| w.lambda(*e) * v).sum::<f64>();
        let combined = ce + w.gamma * vis_total + w.eta * penalty;
        let b = Self {
            ce,
            vis_terms,
            vis_total,
            penalty,
            combined,
        };
        if ![b.ce, b.vis_total, b.penalty, b.combined].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("non-finite loss breakdown {b:?}")));
        }
        Ok(b)
    }
}

/// Decision-token cost: each query is charged its `N` observation slots.
///
/// Depends only on the layout, so it carries no gradient to hidden states or
/// head parameters.
pub fn sparsity_penalty(layout: &SequenceLayout, slot_count: usize) -> f64 {
    (layout.decision_positions.len() * slot_count) as f64
}

/// Expert outputs as tensors, ready for the alignment losses.
#[derive(Clone, Debug)]
pub struct TargetTensors {
    /// `[M, G²]`, `None` when no object is visible.
    pub seg: Option<Tensor>,
    pub depth: Tensor,
    pub edge: Tensor,
    pub patch: Tensor,
}

impl TargetTensors {
    pub fn from_bundle(b: &ExpertFeatureBundle, dtype: DType, dev: &Device) -> Result<Self> {
        let g2 = b.grid_size * b.grid_size;
        let seg = if b.seg.is_empty() {
            None
        } else {
            let flat: Vec<f32> = b.seg.iter().flat_map(|m| m.mask.iter().copied()).collect();
            Some(Tensor::from_vec(flat, (b.seg.len(), g2), dev)?.to_dtype(dtype)?)
        };
        let rows = b.patch.len();
        let width = b.patch.first().map_or(0, Vec::len);
        let patch: Vec<f32> = b.patch.iter().flatten().copied().collect();
        Ok(Self {
            seg,
            depth: Tensor::from_slice(&b.depth, g2, dev)?.to_dtype(dtype)?,
            edge: Tensor::from_slice(&b.edge, g2, dev)?.to_dtype(dtype)?,
            patch: Tensor::from_vec(patch, (rows, width), dev)?.to_dtype(dtype)?,
        })
    }
}

/// Alignment loss of one prediction against its expert's target.
pub fn alignment_loss(pred: &ExpertPrediction, targets: &TargetTensors) -> Result<Tensor> {
    match pred.expert {
        ExpertKind::Seg => seg_align_loss(&pred.values, targets.seg.as_ref()),
        ExpertKind::Depth => dense_l1_loss(&pred.values, &targets.depth),
        ExpertKind::Edge => dense_l1_loss(&pred.values, &targets.edge),
        ExpertKind::Patch => patch_mse_loss(&pred.values, &targets.patch),
    }
}

pub struct VisualLoss {
    /// `Σ λ_m term_m`, differentiable.
    pub total: Tensor,
    pub terms: BTreeMap<ExpertKind, Tensor>,
}

/// Weighted alignment loss over the queried experts.
///
/// An expert queried more than once contributes the mean over its spans.
/// Predictions for experts outside `queried` are ignored.
pub fn visual_loss(
    queried: &BTreeSet<ExpertKind>,
    preds: &[ExpertPrediction],
    targets: &TargetTensors,
    w: &LossWeights,
) -> Result<VisualLoss> {
    let mut terms = BTreeMap::new();
    let mut total: Option<Tensor> = None;
    for &e in queried {
        let spans: Vec<Tensor> = preds
            .iter()
            .filter(|p| p.expert == e)
            .map(|p| alignment_loss(p, targets))
            .collect::<Result<_>>()?;
        if spans.is_empty() {
            return Err(Error::MissingPrediction(e.name().into()));
        }
        let term = (Tensor::stack(&spans, 0)?.mean_all())?;
        let weighted = (&term * w.lambda(e))?;
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
        terms.insert(e, term);
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), targets.depth.dtype(), targets.depth.device())?,
    };
    Ok(VisualLoss { total, terms })
}

/// Minimum combined cost over paths and the first index attaining it.
pub fn sample_loss(paths: &[LossBreakdown]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in paths.iter().enumerate() {
        if best.is_none_or(|(v, _)| p.combined < v) {
            best = Some((p.combined, i));
        }
    }
    best.ok_or(Error::EmptyPathSet)
}
