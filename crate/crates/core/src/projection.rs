//! Per-expert projection heads.
//!
//! A head maps the `N` observation-slot hidden states that follow a decision
//! token into its expert's feature space: a linear layer projects each slot,
//! a set of learned queries cross-attends over the projected slots (single
//! head, no normalization), and a final linear layer expands each attended
//! vector to the expert's output width.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grammar::ExpertKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadDims {
    /// Hidden size of the decoder.
    pub d: usize,
    pub grid_size: usize,
    /// Patches per side of the patch expert.
    pub patch_grid: usize,
    pub d_patch: usize,
    /// Observation slots per query.
    pub slots: usize,
}

impl HeadDims {
    fn validate(&self) -> Result<()> {
        if [self.d, self.grid_size, self.patch_grid, self.d_patch, self.slots].contains(&0) {
            return Err(Error::Config(format!("head dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Learned query count for `expert`.
    pub fn query_count(&self, expert: ExpertKind) -> usize {
        match expert {
            ExpertKind::Seg => self.slots,
            ExpertKind::Depth | ExpertKind::Edge => 1,
            ExpertKind::Patch => self.patch_grid * self.patch_grid,
        }
    }

    /// Width each attended query vector expands to.
    pub fn output_width(&self, expert: ExpertKind) -> usize {
        match expert {
            ExpertKind::Patch => self.d_patch,
            _ => self.grid_size * self.grid_size,
        }
    }

    /// Shape of `project`'s output.
    pub fn output_shape(&self, expert: ExpertKind) -> Vec<usize> {
        match expert {
            ExpertKind::Depth | ExpertKind::Edge => vec![self.output_width(expert)],
            _ => vec![self.query_count(expert), self.output_width(expert)],
        }
    }
}

/// An expert-space prediction synthesized from observation hidden states.
#[derive(Clone, Debug)]
pub struct ExpertPrediction {
    pub expert: ExpertKind,
    /// `[N, G²]` mask logits for seg, `[G²]` for depth and edge,
    /// `[P², d_patch]` for patch.
    pub values: Tensor,
}

pub struct ProjectionHead {
    pub expert: ExpertKind,
    pub dims: HeadDims,
    pub w_in: Var,
    pub b_in: Var,
    pub queries: Var,
    pub w_out: Var,
    pub b_out: Var,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64, dtype: DType, dev: &Device) -> Result<Var> {
    let data: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?)?)
}

/// Seeded initialization. The projected width equals `d`.
pub fn init_head(expert: ExpertKind, dims: HeadDims, seed: u64, dtype: DType, dev: &Device) -> Result<ProjectionHead> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9 * (expert.index() as u64 + 1)));
    let d = dims.d;
    let bound = 1.0 / (d as f64).sqrt();
    let out = dims.output_width(expert);
    Ok(ProjectionHead {
        expert,
        dims,
        w_in: uniform(&mut rng, (d, d), bound, dtype, dev)?,
        b_in: Var::zeros((1, d), dtype, dev)?,
        queries: uniform(&mut rng, (dims.query_count(expert), d), 1.0, dtype, dev)?,
        w_out: uniform(&mut rng, (d, out), bound, dtype, dev)?,
        b_out: Var::zeros((1, out), dtype, dev)?,
    })
}

impl ProjectionHead {
    /// Named parameters, prefixed `heads.<expert>.`.
    pub fn params(&self) -> Vec<(String, &Var)> {
        let p = format!("heads.{}", self.expert.name());
        vec![
            (format!("{p}.w_in"), &self.w_in),
            (format!("{p}.b_in"), &self.b_in),
            (format!("{p}.queries"), &self.queries),
            (format!("{p}.w_out"), &self.w_out),
            (format!("{p}.b_out"), &self.b_out),
        ]
    }

    /// Maps an `[N, d]` block of observation hidden states to a prediction.
    pub fn project(&self, block: &Tensor) -> Result<ExpertPrediction> {
        let (n, d) = block.dims2()?;
        if d != self.dims.d || n != self.dims.slots {
            return Err(Error::ShapeMismatch(format!(
                "{} head expects [{}, {}], got [{n}, {d}]",
                self.expert, self.dims.slots, self.dims.d
            )));
        }
        let block = block.to_dtype(self.w_in.dtype())?;
        let proj = block.matmul(&self.w_in)?.broadcast_add(&self.b_in)?;
        let scores = (self.queries.matmul(&proj.t()?)? / (d as f64).sqrt())?;
        let attn = softmax_rows(&scores)?;
        let out = attn.matmul(&proj)?.matmul(&self.w_out)?.broadcast_add(&self.b_out)?;
        let values = match self.expert {
            ExpertKind::Depth | ExpertKind::Edge => out.squeeze(0)?,
            _ => out,
        };
        Ok(ExpertPrediction {
            expert: self.expert,
            values,
        })
    }
}

/// Row-wise softmax from primitive ops so that it differentiates everywhere.
pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(candle_core::D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// One head per expert, in canonical order.
pub struct HeadSet {
    pub heads: Vec<ProjectionHead>,
}

impl HeadSet {
    pub fn new(dims: HeadDims, seed: u64, dtype: DType, dev: &Device) -> Result<Self> {
        let heads = ExpertKind::ALL
            .iter()
            .map(|&e| init_head(e, dims, seed, dtype, dev))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    pub fn get(&self, expert: ExpertKind) -> &ProjectionHead {
        &self.heads[expert.index()]
    }

    pub fn params(&self) -> Vec<(String, &Var)> {
        self.heads.iter().flat_map(|h| h.params()).collect()
    }
}
