//! Parameterized layers built on the tape ops.

use rand::Rng;

use super::params::{ParamBuilder, ParamId};
use super::tape::{Ctx, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Linear { weight: s.fan_in("weight", &[d_in, d_out], d_in)?, bias: s.zeros("bias", &[d_out])?, d_in, d_out })
    }

    /// Same shapes, all weights zero.
    pub fn zeroed<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Linear { weight: s.zeros("weight", &[d_in, d_out])?, bias: s.zeros("bias", &[d_out])?, d_in, d_out })
    }

    /// Applies to the last axis of `x`; leading axes are preserved.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        ensure!(shape.last() == Some(&self.d_in), Dimension, "linear expects trailing extent {}, got {:?}", self.d_in, shape);
        let rows = x.numel() / self.d_in;
        let flat = if shape.len() == 2 { *x } else { x.reshape(&[rows, self.d_in])? };
        let y = flat.matmul(&ctx.p(self.weight))?.add(&ctx.p(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            y.reshape(&out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, width: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(LayerNorm { gain: s.ones("weight", &[width])?, bias: s.zeros("bias", &[width])? })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        x.layer_norm(&ctx.p(self.gain), &ctx.p(self.bias), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(GroupNorm { gain: s.ones("weight", &[channels])?, bias: s.zeros("bias", &[channels])?, groups })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        x.group_norm(&ctx.p(self.gain), &ctx.p(self.bias), self.groups, 1e-5)
    }
}

/// Channels-last 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Conv2d {
            weight: s.fan_in("weight", &[kernel, kernel, cin, cout], kernel * kernel * cin)?,
            bias: s.zeros("bias", &[cout])?,
            stride,
            pad,
        })
    }

    pub fn zeroed<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Conv2d { weight: s.zeros("weight", &[1, 1, cin, cout])?, bias: s.zeros("bias", &[cout])?, stride: 1, pad: 0 })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        x.conv2d(&ctx.p(self.weight), &ctx.p(self.bias), self.stride, self.pad)
    }
}
