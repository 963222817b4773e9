//! A small decoder over an image prefix and a word-level token stream.
//!
//! The image is cut into square patches, each one-hot encoded per color and
//! linearly embedded; patches attend to each other freely, text positions
//! attend to the whole image and causally to earlier text. Observation slots
//! are ordinary pad-token inputs whose final-layer hidden states feed the
//! projection heads.

mod params;
mod sequence;
mod vocab;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

pub use params::{Init, ParamStore};
pub use sequence::{assemble, ce_loss, CeRegion, TextSequence};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::grammar::ExpertKind;
use crate::projection::softmax_rows;
use crate::world::{Image, COLOR_BINS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum image patches plus text tokens.
    pub context: usize,
    pub grid_size: usize,
    /// Side of one image patch in pixels.
    pub image_patch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            layers: 4,
            heads: 4,
            context: 256,
            grid_size: 32,
            image_patch: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.image_patch == 0 || !self.grid_size.is_multiple_of(self.image_patch) {
            return Err(Error::Config(format!(
                "grid {} not divisible into {}-pixel patches",
                self.grid_size, self.image_patch
            )));
        }
        if self.context <= self.image_tokens() {
            return Err(Error::Config("context leaves no room for text".into()));
        }
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        let side = self.grid_size / self.image_patch;
        side * side
    }

    fn patch_features(&self) -> usize {
        self.image_patch * self.image_patch * COLOR_BINS
    }

    pub fn max_text(&self) -> usize {
        self.context - self.image_tokens()
    }
}

/// Per text position: logits for the next token and the final hidden state.
pub struct ForwardResult {
    /// `[T, V]`; row `t` predicts text token `t + 1`.
    pub logits: Tensor,
    /// `[T, d]`, final layer after normalization.
    pub hidden: Tensor,
}

struct Block {
    ln1: (Tensor, Tensor),
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2: (Tensor, Tensor),
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct Decoder {
    pub cfg: BackboneConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    dtype: DType,
    device: Device,
}

const LN_EPS: f64 = 1e-5;

fn layer_norm(x: &Tensor, (g, b): &(Tensor, Tensor)) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(xn.broadcast_mul(g)?.broadcast_add(b)?)
}

/// Per-layer keys and values `[H, L, dh]` for incremental decoding.
pub struct DecodeState {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    /// Text tokens consumed so far.
    pub text_len: usize,
}

impl Decoder {
    pub fn new(cfg: BackboneConfig, vocab: Vocab, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let v = vocab.len();
        let mut init = Init::new(seed, dtype, device);
        let mut p = ParamStore::default();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        p.insert("patch_embed.w", init.uniform((cfg.patch_features(), d), lin(cfg.patch_features()))?)?;
        p.insert("patch_embed.b", init.constant((1, d), 0.0)?)?;
        p.insert("image_pos", init.uniform((cfg.image_tokens(), d), 0.1)?)?;
        p.insert("tok_embed", init.uniform((v, d), 0.5)?)?;
        p.insert("text_pos", init.uniform((cfg.max_text(), d), 0.1)?)?;
        for l in 0..cfg.layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            p.insert(n("ln1.g"), init.constant((1, d), 1.0)?)?;
            p.insert(n("ln1.b"), init.constant((1, d), 0.0)?)?;
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(n(w), init.uniform((d, d), lin(d))?)?;
            }
            p.insert(n("ln2.g"), init.constant((1, d), 1.0)?)?;
            p.insert(n("ln2.b"), init.constant((1, d), 0.0)?)?;
            p.insert(n("w1"), init.uniform((d, 4 * d), lin(d))?)?;
            p.insert(n("b1"), init.constant((1, 4 * d), 0.0)?)?;
            p.insert(n("w2"), init.uniform((4 * d, d), lin(4 * d))?)?;
            p.insert(n("b2"), init.constant((1, d), 0.0)?)?;
        }
        p.insert("ln_f.g", init.constant((1, d), 1.0)?)?;
        p.insert("ln_f.b", init.constant((1, d), 0.0)?)?;
        p.insert("lm_head", init.uniform((d, v), lin(d))?)?;
        Ok(Self {
            cfg,
            vocab,
            params: p,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn t(&self, name: &str) -> Result<Tensor> {
        Ok(self.params.get(name)?.as_tensor().clone())
    }

    fn block(&self, l: usize) -> Result<Block> {
        let n = |s: &str| self.t(&format!("blocks.{l}.{s}"));
        Ok(Block {
            ln1: (n("ln1.g")?, n("ln1.b")?),
            wq: n("wq")?,
            wk: n("wk")?,
            wv: n("wv")?,
            wo: n("wo")?,
            ln2: (n("ln2.g")?, n("ln2.b")?),
            w1: n("w1")?,
            b1: n("b1")?,
            w2: n("w2")?,
            b2: n("b2")?,
        })
    }

    /// One-hot color patches, `[patches, image_patch² · COLOR_BINS]`.
    pub fn image_features(&self, image: &Image) -> Result<Tensor> {
        let c = &self.cfg;
        if image.grid_size != c.grid_size {
            return Err(Error::ShapeMismatch(format!(
                "image grid {} but model expects {}",
                image.grid_size, c.grid_size
            )));
        }
        let side = c.grid_size / c.image_patch;
        let width = c.patch_features();
        let mut data = vec![0f32; c.image_tokens() * width];
        for py in 0..side {
            for px in 0..side {
                let row = &mut data[(py * side + px) * width..][..width];
                for y in 0..c.image_patch {
                    for x in 0..c.image_patch {
                        let v = image.get(px * c.image_patch + x, py * c.image_patch + y) as usize;
                        row[(y * c.image_patch + x) * COLOR_BINS + v] = 1.0;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (c.image_tokens(), width), &self.device)?.to_dtype(self.dtype)?)
    }

    fn embed_image(&self, features: &Tensor) -> Result<Tensor> {
        let x = features.matmul(&self.t("patch_embed.w")?)?.broadcast_add(&self.t("patch_embed.b")?)?;
        Ok((x + self.t("image_pos")?)?)
    }

    fn embed_text(&self, ids: &[u32], start: usize) -> Result<Tensor> {
        let idx = Tensor::new(ids, &self.device)?;
        let tok = self.t("tok_embed")?.index_select(&idx, 0)?;
        let pos = self.t("text_pos")?.narrow(0, start, ids.len())?;
        Ok((tok + pos)?)
    }

    /// Input embedding of the expert's pad token, fed at every observation slot.
    pub fn observation_input_embedding(&self, expert: ExpertKind) -> Result<Tensor> {
        let id = self.vocab.id(expert.pad_token())?;
        Ok(self.t("tok_embed")?.get(id as usize)?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (l, d) = x.dims2()?;
        let h = self.cfg.heads;
        Ok(x.reshape((l, h, d / h))?.transpose(0, 1)?.contiguous()?)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (h, l, dh) = x.dims3()?;
        Ok(x.transpose(0, 1)?.contiguous()?.reshape((l, h * dh))?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let dh = q.dim(2)?;
        let mut scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        Ok(softmax_rows(&scores)?.matmul(v)?)
    }

    fn mlp(&self, b: &Block, x: &Tensor) -> Result<Tensor> {
        let h = layer_norm(x, &b.ln2)?;
        let h = h.matmul(&b.w1)?.broadcast_add(&b.b1)?.gelu()?;
        Ok(h.matmul(&b.w2)?.broadcast_add(&b.b2)?)
    }

    fn mask(&self, p: usize, t: usize) -> Result<Tensor> {
        let l = p + t;
        let mut m = vec![0f32; l * l];
        for i in 0..l {
            for j in 0..l {
                let blocked = if i < p { j >= p } else { j > i };
                if blocked {
                    m[i * l + j] = -1e9;
                }
            }
        }
        Ok(Tensor::from_vec(m, (l, l), &self.device)?.to_dtype(self.dtype)?)
    }

    fn check_len(&self, text: usize) -> Result<()> {
        let len = self.cfg.image_tokens() + text;
        if len > self.cfg.context {
            return Err(Error::ContextOverflow {
                len,
                max: self.cfg.context,
            });
        }
        Ok(())
    }

    /// Teacher-forced pass over `[image; ids]`.
    pub fn forward(&self, image: &Tensor, ids: &[u32]) -> Result<ForwardResult> {
        self.check_len(ids.len())?;
        let p = self.cfg.image_tokens();
        let mut x = Tensor::cat(&[self.embed_image(image)?, self.embed_text(ids, 0)?], 0)?;
        let mask = self.mask(p, ids.len())?;
        for l in 0..self.cfg.layers {
            let b = self.block(l)?;
            let h = layer_norm(&x, &b.ln1)?;
            let q = self.split_heads(&h.matmul(&b.wq)?)?;
            let k = self.split_heads(&h.matmul(&b.wk)?)?;
            let v = self.split_heads(&h.matmul(&b.wv)?)?;
            let a = self.merge_heads(&self.attend(&q, &k, &v, Some(&mask))?)?;
            x = (x + a.matmul(&b.wo)?)?;
            x = (&x + self.mlp(&b, &x)?)?;
        }
        let hidden = layer_norm(&x.narrow(0, p, ids.len())?, &(self.t("ln_f.g")?, self.t("ln_f.b")?))?;
        let logits = hidden.matmul(&self.t("lm_head")?)?;
        Ok(ForwardResult { logits, hidden })
    }

    /// Runs the image prefix and returns a decode state ready for text.
    pub fn start(&self, image: &Tensor) -> Result<DecodeState> {
        let p = self.cfg.image_tokens();
        let mut x = self.embed_image(image)?;
        let mask = self.mask(p, 0)?;
        let mut state = DecodeState {
            keys: Vec::new(),
            values: Vec::new(),
            text_len: 0,
        };
        for l in 0..self.cfg.layers {
            let b = self.block(l)?;
            let h = layer_norm(&x, &b.ln1)?;
            let q = self.split_heads(&h.matmul(&b.wq)?)?;
            let k = self.split_heads(&h.matmul(&b.wk)?)?;
            let v = self.split_heads(&h.matmul(&b.wv)?)?;
            let a = self.merge_heads(&self.attend(&q, &k, &v, Some(&mask))?)?;
            state.keys.push(k);
            state.values.push(v);
            x = (x + a.matmul(&b.wo)?)?;
            x = (&x + self.mlp(&b, &x)?)?;
        }
        Ok(state)
    }

    /// Appends one text token; returns next-token logits `[V]` and the
    /// final hidden state `[d]` at the new position.
    pub fn step(&self, state: &mut DecodeState, id: u32) -> Result<(Tensor, Tensor)> {
        self.check_len(state.text_len + 1)?;
        let mut x = self.embed_text(&[id], state.text_len)?;
        for l in 0..self.cfg.layers {
            let b = self.block(l)?;
            let h = layer_norm(&x, &b.ln1)?;
            let q = self.split_heads(&h.matmul(&b.wq)?)?;
            let k = Tensor::cat(&[&state.keys[l], &self.split_heads(&h.matmul(&b.wk)?)?], 1)?;
            let v = Tensor::cat(&[&state.values[l], &self.split_heads(&h.matmul(&b.wv)?)?], 1)?;
            let a = self.merge_heads(&self.attend(&q, &k, &v, None)?)?;
            state.keys[l] = k;
            state.values[l] = v;
            x = (x + a.matmul(&b.wo)?)?;
            x = (&x + self.mlp(&b, &x)?)?;
        }
        state.text_len += 1;
        let hidden = layer_norm(&x, &(self.t("ln_f.g")?, self.t("ln_f.b")?))?;
        let logits = hidden.matmul(&self.t("lm_head")?)?;
        Ok((logits.squeeze(0)?, hidden.squeeze(0)?))
    }
}
