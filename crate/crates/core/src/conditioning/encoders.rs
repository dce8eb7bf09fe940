//! Small trainable stand-ins for the frozen text and image encoders.

use rand::Rng;

use super::tokenizer::Vocab;
use crate::error::{ensure, Result};
use crate::ssm::{MambaBlock, MambaConfig};
use crate::tensor::nn::Linear;
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, ParamId, Tensor, Var};

pub const PATCH: usize = 8;

/// Unknown pixels zeroed, mask appended as the last channel.
pub fn masked_channels(img: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    ensure!(img.rank() == 3, Dimension, "expected [H, W, C], got {:?}", img.shape());
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if let Some(m) = mask {
        ensure!(m.shape() == [h, w], Dimension, "mask {:?} for image {:?}", m.shape(), img.shape());
    }
    let mut out = Vec::with_capacity(h * w * (c + 1));
    for i in 0..h * w {
        let known = mask.map_or(1.0, |m| m.data()[i]);
        out.extend(img.data()[i * c..(i + 1) * c].iter().map(|v| v * known));
        out.push(known);
    }
    Tensor::new(&[h, w, c + 1], out)
}

/// `[H, W, C]` → `[(H/p)·(W/p), p·p·C]`, patches in row-major order.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    ensure!(img.rank() == 3, Dimension, "expected [H, W, C], got {:?}", img.shape());
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    ensure!(h % p == 0 && w % p == 0, Dimension, "extent {}x{} not divisible by patch {}", h, w, p);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let o = ((gy * p + dy) * w + gx * p) * c;
                out.extend_from_slice(&img.data()[o..o + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub vocab: Vocab,
    pub embed: ParamId,
    pub blocks: Vec<MambaBlock>,
}

impl ToyTextEncoder {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, vocab: Vocab, cfg: MambaConfig) -> Result<Self> {
        let mut s = b.sub(name);
        let embed = s.normal("embed", &[vocab.len(), cfg.d_model], 0.5)?;
        let blocks = (0..2).map(|i| MambaBlock::new_1d(&mut s, &format!("block{i}"), cfg)).collect::<Result<_>>()?;
        Ok(ToyTextEncoder { vocab, embed, blocks })
    }

    /// Always `[77, d]`; the empty string gives the all-pad encoding.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, text: &str) -> Result<Var<'a>> {
        let ids = self.vocab.encode(text);
        let mut x = ctx.p(self.embed).gather_rows(&ids)?;
        for blk in &self.blocks {
            x = blk.forward(ctx, &x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    pub patch: Linear,
    pub blocks: Vec<MambaBlock>,
}

impl ToyImageEncoder {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: MambaConfig) -> Result<Self> {
        let mut s = b.sub(name);
        // RGB plus the validity channel
        let patch = Linear::new(&mut s, "patch", PATCH * PATCH * 4, cfg.d_model)?;
        let blocks = (0..2).map(|i| MambaBlock::new_2d(&mut s, &format!("block{i}"), cfg)).collect::<Result<_>>()?;
        Ok(ToyImageEncoder { patch, blocks })
    }

    /// One `[1, d]` row per image.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, img: &Tensor, mask: Option<&Tensor>) -> Result<Var<'a>> {
        let x = masked_channels(img, mask)?;
        let (gh, gw) = (x.shape()[0] / PATCH, x.shape()[1] / PATCH);
        let tokens = ctx.constant(patchify(&x, PATCH)?);
        let d = self.patch.d_out;
        let mut g = self.patch.forward(ctx, &tokens)?.reshape(&[gh, gw, d])?;
        for blk in &self.blocks {
            g = blk.forward(ctx, &g)?;
        }
        g.mean_axes(&[0, 1])?.reshape(&[1, d])
    }
}
