//! Conditioning for the denoiser: the refined semantic context `c_vcr` and
//! the four adapter maps `c_gma`.

pub mod encoders;
pub mod gma;
pub mod tokenizer;
pub mod vcr;

use rand::{Rng, RngExt};

pub use encoders::{ToyImageEncoder, ToyTextEncoder};
pub use gma::{gma_inputs, Gma, GmaConfig};
pub use tokenizer::{Vocab, MAX_TOKENS};
pub use vcr::{reweight, Vcr, VcrOutput};

use crate::error::{ensure, Result};
use crate::geometry::{CubeMap, Face, NFoVView};
use crate::tensor::{Ctx, Var};

/// Six face rows followed by the text rows.
pub const CLIP_LEN: usize = 6 + MAX_TOKENS;

/// Everything the denoiser is conditioned on.
pub struct ConditionBundle<'a> {
    /// `[83, d]`.
    pub c_vcr: Var<'a>,
    /// One map per adapter scale, finest first.
    pub c_gma: Vec<Var<'a>>,
}

impl ConditionBundle<'_> {
    pub fn all_finite(&self) -> bool {
        self.c_vcr.value().all_finite() && self.c_gma.iter().all(|c| c.value().all_finite())
    }
}

/// `[83, d]`: one image-encoder row per face in [`Face::ALL`] order, then the
/// 77 text rows.
pub fn build_clip_condition<'a>(
    ctx: &Ctx<'a>,
    text_enc: &ToyTextEncoder,
    image_enc: &ToyImageEncoder,
    cube: &CubeMap,
    text: &str,
) -> Result<Var<'a>> {
    let mut rows = Vec::with_capacity(7);
    for f in Face::ALL {
        rows.push(image_enc.forward(ctx, cube.face(f), cube.face_mask(f))?);
    }
    rows.push(text_enc.forward(ctx, text)?);
    let c = Var::concat_rows(&rows)?;
    ensure!(c.shape()[0] == CLIP_LEN, Dimension, "joint context has {} rows", c.shape()[0]);
    Ok(c)
}

/// Replaces the prompt by the empty string with probability one half. One
/// draw is consumed per call, whatever the input.
pub fn text_dropout<'s, R: Rng>(text: &'s str, rng: &mut R) -> &'s str {
    if rng.random_bool(0.5) {
        ""
    } else {
        text
    }
}

/// The encoders, the refiner and the adapter.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub text: ToyTextEncoder,
    pub image: ToyImageEncoder,
    pub vcr: Vcr,
    pub gma: Gma,
}

impl Conditioner {
    pub fn condition<'a>(&self, ctx: &Ctx<'a>, local: &NFoVView, cube: &CubeMap, text: &str) -> Result<ConditionBundle<'a>> {
        let c_clip = build_clip_condition(ctx, &self.text, &self.image, cube, text)?;
        let c_vcr = self.vcr.forward(ctx, &c_clip)?.c_vcr;
        let c_gma = self.gma.forward(ctx, &gma_inputs(local, cube)?)?;
        Ok(ConditionBundle { c_vcr, c_gma })
    }
}
