//! Two-stage training and the think/query/simulate/think inference loop.

mod checkpoint;
mod evaluate;
mod generate;
mod train;

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_traces, save_checkpoint, write_traces, Checkpoint, CheckpointMeta, TraceRecord, CHECKPOINT_SCHEMA_VERSION};
pub use evaluate::{evaluate, EvalMode, EvalReport};
pub use generate::{generate, GenerateLimits, GenerationTrace, PhaseTimes, QueryPlan};
pub use evaluate::{evaluate_parallel, evaluate_traced, EVAL_SCHEMA_VERSION};
pub use train::{train_stage1, train_stage2, StepRecord, TrainMetrics};

use crate::error::{Error, Result};
use crate::grammar::ExpertKind;
use crate::losses::{sparsity_penalty, visual_loss, LossBreakdown, LossWeights, TargetTensors};
use crate::model::{ce_loss, BackboneConfig, Decoder, ForwardResult, TextSequence, Vocab};
use crate::projection::{ExpertPrediction, HeadDims, HeadSet};
use crate::world::{PATCH_DIM, PATCH_GRID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub weights: LossWeights,
    /// Observation slots per query.
    pub slots: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Allows stage 2 from a fresh model.
    pub skip_stage1: bool,
    /// Recorded for reference; adapters are not used by the small model.
    pub lora_rank: usize,
    pub lora_alpha: usize,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            weights: LossWeights::stage1(),
            slots: crate::grammar::DEFAULT_SLOT_COUNT,
            steps: 2000,
            batch_size: 8,
            lr_backbone: 1e-3,
            lr_heads: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            skip_stage1: false,
            lora_rank: 16,
            lora_alpha: 32,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            weights: LossWeights::stage2(),
            steps: 1500,
            lr_backbone: 5e-4,
            lr_heads: 5e-4,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        match self.stage {
            1 if self.weights.eta != 0.0 => {
                return Err(Error::Config(format!("stage 1 requires eta = 0, got {}", self.weights.eta)))
            }
            1 | 2 => {}
            s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
        if self.slots == 0 || self.batch_size == 0 {
            return Err(Error::Config("slots and batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Decoder plus projection heads: everything a checkpoint holds.
pub struct Network {
    pub decoder: Decoder,
    pub heads: HeadSet,
    pub slots: usize,
    /// Stages completed, in order.
    pub history: Vec<u8>,
    /// Config and sampler position of the most recent training run.
    pub train_state: Option<TrainState>,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    /// Word position as a decimal string; JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: TrainConfig,
    pub rng: RngState,
}

impl Network {
    pub fn new(cfg: BackboneConfig, slots: usize, seed: u64, device: &Device) -> Result<Self> {
        let dims = HeadDims {
            d: cfg.hidden_dim,
            grid_size: cfg.grid_size,
            patch_grid: PATCH_GRID,
            d_patch: PATCH_DIM,
            slots,
        };
        let decoder = Decoder::new(cfg, Vocab::standard(), seed, DType::F32, device)?;
        let heads = HeadSet::new(dims, seed.wrapping_add(1), DType::F32, device)?;
        Ok(Self {
            decoder,
            heads,
            slots,
            history: Vec::new(),
            train_state: None,
        })
    }

    /// Deep copy with independent parameters.
    pub fn try_clone(&self) -> Result<Self> {
        let copy = Self {
            decoder: Decoder::new(
                self.decoder.cfg.clone(),
                self.decoder.vocab.clone(),
                0,
                self.decoder.dtype(),
                self.decoder.device(),
            )?,
            heads: HeadSet::new(self.head_dims(), 0, self.decoder.dtype(), self.decoder.device())?,
            slots: self.slots,
            history: self.history.clone(),
            train_state: self.train_state.clone(),
        };
        for ((_, dst), (_, src)) in copy.decoder.params.iter().zip(self.decoder.params.iter()) {
            dst.set(src.as_tensor())?;
        }
        for ((_, dst), (_, src)) in copy.heads.params().into_iter().zip(self.heads.params()) {
            dst.set(src.as_tensor())?;
        }
        Ok(copy)
    }

    pub fn head_dims(&self) -> HeadDims {
        self.heads.heads[0].dims
    }

    pub fn backbone_vars(&self) -> Vec<Var> {
        self.decoder.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn head_vars(&self) -> Vec<Var> {
        self.heads.params().into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Every parameter under its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .decoder
            .params
            .iter()
            .map(|(n, v)| (format!("backbone.{n}"), v.as_tensor().clone()))
            .collect();
        out.extend(self.heads.params().into_iter().map(|(n, v)| (n, v.as_tensor().clone())));
        out
    }

    /// Projects every query span's observation hidden states, in order.
    pub fn predictions(&self, fwd: &ForwardResult, seq: &TextSequence) -> Result<Vec<ExpertPrediction>> {
        seq.layout
            .observation_positions
            .iter()
            .map(|(&pos, slots)| {
                let expert = ExpertKind::from_decision_token(&seq.tokens[pos])
                    .ok_or_else(|| Error::LayoutMismatch(format!("no decision token at {pos}")))?;
                let block = fwd.hidden.narrow(0, slots[0], slots.len())?;
                self.heads.get(expert).project(&block)
            })
            .collect()
    }
}

/// Differentiable loss of one teacher-forced sequence with its breakdown.
pub(crate) struct PathLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

pub(crate) fn path_loss(
    net: &Network,
    image: &Tensor,
    seq: &TextSequence,
    targets: &TargetTensors,
    w: &LossWeights,
) -> Result<PathLoss> {
    let fwd = net.decoder.forward(image, &seq.ids)?;
    let ce = ce_loss(&fwd.logits, &seq.ids, &seq.ce_positions)?;
    let preds = net.predictions(&fwd, seq)?;
    let queried: BTreeSet<ExpertKind> = preds.iter().map(|p| p.expert).collect();
    let vis = visual_loss(&queried, &preds, targets, w)?;
    let penalty = sparsity_penalty(&seq.layout, net.slots);
    let total = (&ce + (&vis.total * w.gamma)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let terms = vis
        .terms
        .iter()
        .map(|(e, t)| Ok((*e, scalar(t)?)))
        .collect::<Result<_>>()?;
    let breakdown = LossBreakdown::new(scalar(&ce)?, terms, penalty, w)?;
    Ok(PathLoss { total, breakdown })
}
