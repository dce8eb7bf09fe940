//! Small ε-predicting U-Net over channels-last latents.
//!
//! Four encoder stages, each two residual blocks, a cross-attention block
//! over `c_vcr` and a stride-2 downsample. The adapter map for stage `s` is
//! added right after that stage's downsample through a zero-initialized
//! 1×1 projection, so an untrained adapter leaves the network unchanged.

use rand::Rng;

use crate::conditioning::ConditionBundle;
use crate::error::{ensure, Result};
use crate::tensor::nn::{Conv2d, GroupNorm, LayerNorm, Linear};
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, Tensor, Var};

pub const STAGES: usize = 4;
/// Latent extents must divide by this.
pub const DOWNSAMPLE: usize = 1 << STAGES;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub channels: [usize; STAGES],
    pub d_time: usize,
    /// Width of the cross-attention context.
    pub d_ctx: usize,
    pub groups: usize,
    pub latent_channels: usize,
    /// Adapter output width per stage.
    pub gma_widths: [usize; STAGES],
}

impl UNetConfig {
    /// Channel ladder 32/64/96/128 scaled by `mult / 32`.
    pub fn ladder(mult: usize, d_ctx: usize) -> Self {
        let channels = [mult, 2 * mult, 3 * mult, 4 * mult];
        UNetConfig { channels, d_time: 128, d_ctx, groups: 8, latent_channels: 4, gma_widths: channels }
    }

    pub fn validate(&self) -> Result<()> {
        for &c in &self.channels {
            ensure!(c > 0 && c % self.groups == 0, Config, "channel count {} not divisible by {} groups", c, self.groups);
        }
        ensure!(self.d_time >= 2 && self.d_time.is_multiple_of(2), Config, "time width {} must be even", self.d_time);
        ensure!(self.d_ctx > 0 && self.latent_channels > 0, Config, "context and latent widths must be positive");
        Ok(())
    }
}

/// Sinusoidal features at geometric frequencies `10000^(−i/half)`: the
/// first half sines, the second half cosines.
pub fn sinusoidal(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[d], |i| {
        let k = i % half;
        let phase = t * (-(10000f64.ln()) * k as f64 / half as f64).exp();
        if i < half {
            phase.sin()
        } else {
            phase.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct TimeEmbed {
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(TimeEmbed { l1: Linear::new(&mut s, "l1", d, d)?, l2: Linear::new(&mut s, "l2", d, d)? })
    }

    /// `[1, d_time]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, t: usize) -> Result<Var<'a>> {
        let d = self.l1.d_in;
        let x = ctx.constant(sinusoidal(t as f64, d).reshape(&[1, d])?);
        self.l2.forward(ctx, &self.l1.forward(ctx, &x)?.silu())
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> Result<Self> {
        let mut s = b.sub(name);
        let groups_in = if cin.is_multiple_of(cfg.groups) { cfg.groups } else { 1 };
        Ok(ResBlock {
            norm1: GroupNorm::new(&mut s, "norm1", cin, groups_in)?,
            conv1: Conv2d::new(&mut s, "conv1", cin, cout, 3, 1, 1)?,
            time: Linear::new(&mut s, "time", cfg.d_time, cout)?,
            norm2: GroupNorm::new(&mut s, "norm2", cout, cfg.groups)?,
            conv2: Conv2d::new(&mut s, "conv2", cout, cout, 3, 1, 1)?,
            skip: if cin == cout { None } else { Some(Conv2d::new(&mut s, "skip", cin, cout, 1, 1, 0)?) },
        })
    }

    /// `temb` is the activated `[1, d_time]` embedding.
    fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>, temb: &Var<'a>) -> Result<Var<'a>> {
        let h = self.conv1.forward(ctx, &self.norm1.forward(ctx, x)?.silu())?;
        let tproj = self.time.forward(ctx, temb)?;
        let h = h.add(&tproj.reshape(&[self.time.d_out])?)?;
        let h = self.conv2.forward(ctx, &self.norm2.forward(ctx, &h)?.silu())?;
        let skip = match &self.skip {
            Some(c) => c.forward(ctx, x)?,
            None => *x,
        };
        skip.add(&h)
    }
}

/// Single-head scaled dot-product attention from pixels to context rows.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, ch: usize, d_ctx: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(CrossAttention {
            norm: LayerNorm::new(&mut s, "norm", ch)?,
            q: Linear::new(&mut s, "q", ch, ch)?,
            k: Linear::new(&mut s, "k", d_ctx, ch)?,
            v: Linear::new(&mut s, "v", d_ctx, ch)?,
            o: Linear::new(&mut s, "o", ch, ch)?,
        })
    }

    fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>, context: &Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let xf = x.reshape(&[h * w, c])?;
        let q = self.q.forward(ctx, &self.norm.forward(ctx, &xf)?)?;
        let k = self.k.forward(ctx, context)?;
        let v = self.v.forward(ctx, context)?;
        let att = q.matmul(&k.transpose()?)?.scale(1.0 / (c as f64).sqrt()).softmax_last()?;
        let out = self.o.forward(ctx, &att.matmul(&v)?)?;
        xf.add(&out)?.reshape(&[h, w, c])
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub res1: ResBlock,
    pub res2: ResBlock,
    pub attn: CrossAttention,
    pub down: Conv2d,
    /// Zero-initialized 1×1 projection of the adapter map.
    pub inject: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub res1: ResBlock,
    pub res2: ResBlock,
    pub attn: CrossAttention,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub time: TimeEmbed,
    pub stem: Conv2d,
    pub encoder: Vec<EncoderStage>,
    pub mid1: ResBlock,
    pub mid_attn: CrossAttention,
    pub mid2: ResBlock,
    /// Coarsest first.
    pub decoder: Vec<DecoderStage>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
}

impl UNet {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.sub(name);
        let ch = cfg.channels;
        let time = TimeEmbed::new(&mut s, "time", cfg.d_time)?;
        let stem = Conv2d::new(&mut s, "stem", cfg.latent_channels, ch[0], 3, 1, 1)?;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = ch[0];
        for (k, &c) in ch.iter().enumerate() {
            let mut e = s.sub(&format!("enc{}", k + 1));
            encoder.push(EncoderStage {
                res1: ResBlock::new(&mut e, "res1", cin, c, &cfg)?,
                res2: ResBlock::new(&mut e, "res2", c, c, &cfg)?,
                attn: CrossAttention::new(&mut e, "attn", c, cfg.d_ctx)?,
                down: Conv2d::new(&mut e, "down", c, c, 3, 2, 1)?,
                inject: Conv2d::zeroed(&mut e, "inject", cfg.gma_widths[k], c)?,
            });
            cin = c;
        }
        let top = ch[STAGES - 1];
        let mid1 = ResBlock::new(&mut s, "mid1", top, top, &cfg)?;
        let mid_attn = CrossAttention::new(&mut s, "mid_attn", top, cfg.d_ctx)?;
        let mid2 = ResBlock::new(&mut s, "mid2", top, top, &cfg)?;
        let mut decoder = Vec::with_capacity(STAGES);
        let mut cur = top;
        for k in (0..STAGES).rev() {
            let c = ch[k];
            let mut d = s.sub(&format!("dec{}", k + 1));
            decoder.push(DecoderStage {
                res1: ResBlock::new(&mut d, "res1", cur + c, c, &cfg)?,
                res2: ResBlock::new(&mut d, "res2", c, c, &cfg)?,
                attn: CrossAttention::new(&mut d, "attn", c, cfg.d_ctx)?,
            });
            cur = c;
        }
        let out_norm = GroupNorm::new(&mut s, "out_norm", ch[0], cfg.groups)?;
        let out_conv = Conv2d::new(&mut s, "out_conv", ch[0], cfg.latent_channels, 3, 1, 1)?;
        Ok(UNet { cfg, time, stem, encoder, mid1, mid_attn, mid2, decoder, out_norm, out_conv })
    }

    /// Adapter map extents expected for a latent of `h × w`.
    pub fn injection_extents(h: usize, w: usize) -> [(usize, usize); STAGES] {
        std::array::from_fn(|k| (h >> (k + 1), w >> (k + 1)))
    }

    /// `z_t` `[h, w, C]` → `ε̂` of the same shape.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, z_t: &Var<'a>, t: usize, conds: &ConditionBundle<'a>) -> Result<Var<'a>> {
        let shape = z_t.shape();
        ensure!(
            shape.len() == 3 && shape[2] == self.cfg.latent_channels,
            Dimension,
            "latent must be [h, w, {}], got {:?}",
            self.cfg.latent_channels,
            shape
        );
        let (h, w) = (shape[0], shape[1]);
        ensure!(
            h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0 && h > 0 && w > 0,
            Dimension,
            "latent extents {}x{} must be multiples of {}",
            h,
            w,
            DOWNSAMPLE
        );
        ensure!(
            conds.c_vcr.shape().len() == 2 && conds.c_vcr.shape()[1] == self.cfg.d_ctx,
            Dimension,
            "context {:?} does not have width {}",
            conds.c_vcr.shape(),
            self.cfg.d_ctx
        );
        ensure!(conds.c_gma.len() == STAGES, Dimension, "expected {} adapter maps, got {}", STAGES, conds.c_gma.len());
        for (k, ((eh, ew), g)) in Self::injection_extents(h, w).iter().zip(&conds.c_gma).enumerate() {
            ensure!(
                g.shape() == [*eh, *ew, self.cfg.gma_widths[k]],
                Dimension,
                "adapter map {} is {:?}, stage expects [{}, {}, {}]",
                k + 1,
                g.shape(),
                eh,
                ew,
                self.cfg.gma_widths[k]
            );
        }
        let temb = self.time.forward(ctx, t)?.silu();
        let c = &conds.c_vcr;
        let mut x = self.stem.forward(ctx, z_t)?;
        let mut skips = Vec::with_capacity(STAGES);
        for (st, g) in self.encoder.iter().zip(&conds.c_gma) {
            x = st.res1.forward(ctx, &x, &temb)?;
            x = st.res2.forward(ctx, &x, &temb)?;
            x = st.attn.forward(ctx, &x, c)?;
            skips.push(x);
            x = st.down.forward(ctx, &x)?;
            x = x.add(&st.inject.forward(ctx, g)?)?;
        }
        x = self.mid1.forward(ctx, &x, &temb)?;
        x = self.mid_attn.forward(ctx, &x, c)?;
        x = self.mid2.forward(ctx, &x, &temb)?;
        for (st, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            x = Var::concat_last(&[x.upsample2x()?, *skip])?;
            x = st.res1.forward(ctx, &x, &temb)?;
            x = st.res2.forward(ctx, &x, &temb)?;
            x = st.attn.forward(ctx, &x, c)?;
        }
        self.out_conv.forward(ctx, &self.out_norm.forward(ctx, &x)?.silu())
    }
}

#[cfg(test)]
mod tests;
