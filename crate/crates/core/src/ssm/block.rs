use rand::{Rng, RngExt};

use super::op::selective_scan;
use crate::error::{ensure, Result};
use crate::tensor::nn::{LayerNorm, Linear};
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        MambaConfig { d_model, d_state, expand: 2, conv_width: 4 }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// One scan direction: causal conv, selective projections and the SSM.
#[derive(Clone, Debug)]
pub struct ScanBranch {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub x_to_delta: Linear,
    pub x_to_b: Linear,
    pub x_to_c: Linear,
    /// `A = −exp(A_log)`, `[d_inner, N]`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl ScanBranch {
    fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: &MambaConfig) -> Result<Self> {
        let (di, n, k) = (cfg.d_inner(), cfg.d_state, cfg.conv_width);
        let mut s = b.sub(name);
        let conv_weight = s.fan_in("conv.weight", &[di, k], k)?;
        let conv_bias = s.zeros("conv.bias", &[di])?;
        // bias = softplus⁻¹ of a log-uniform step in [1e-3, 0.1]
        let dt_bias = Tensor::from_fn(&[di], |_| {
            let dt: f64 = s.rng().random_range(1e-3f64.ln()..0.1f64.ln()).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        let x_to_delta = Linear {
            weight: s.fan_in("x_to_delta.weight", &[di, di], di)?,
            bias: s.tensor("x_to_delta.bias", dt_bias)?,
            d_in: di,
            d_out: di,
        };
        let x_to_b = Linear::new(&mut s, "x_to_B", di, n)?;
        let x_to_c = Linear::new(&mut s, "x_to_C", di, n)?;
        let a_log = s.tensor("A_log", Tensor::from_fn(&[di, n], |i| ((i % n) as f64 + 1.0).ln()))?;
        let d_skip = s.ones("D_skip", &[di])?;
        Ok(ScanBranch { conv_weight, conv_bias, x_to_delta, x_to_b, x_to_c, a_log, d_skip })
    }

    /// `u0` `[L, d_inner]` → (`[L, d_inner]`, final state `[d_inner, N]`).
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, u0: &Var<'a>, h0: Option<&Var<'a>>) -> Result<(Var<'a>, Var<'a>)> {
        let u = u0.causal_conv1d(&ctx.p(self.conv_weight), &ctx.p(self.conv_bias))?.silu();
        let delta = self.x_to_delta.forward(ctx, &u)?.softplus();
        let b = self.x_to_b.forward(ctx, &u)?;
        let c = self.x_to_c.forward(ctx, &u)?;
        let a = ctx.p(self.a_log).exp().neg();
        let (y, h) = selective_scan(&u, &delta, &a, &b, &c, h0)?;
        Ok((y.add(&u.mul(&ctx.p(self.d_skip))?)?, h))
    }
}

/// Residual Mamba block. One branch gives the causal 1-D block; two give
/// the bidirectional block, whose second branch reads the sequence reversed.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub out_proj: Linear,
    pub branches: Vec<ScanBranch>,
}

impl MambaBlock {
    fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: MambaConfig, names: &[&str]) -> Result<Self> {
        let mut s = b.sub(name);
        let (d, di) = (cfg.d_model, cfg.d_inner());
        let norm = LayerNorm::new(&mut s, "norm", d)?;
        let in_proj = Linear::new(&mut s, "in_proj", d, di)?;
        let gate_proj = Linear::new(&mut s, "gate_proj", d, di)?;
        let branches = names.iter().map(|n| ScanBranch::new(&mut s, n, &cfg)).collect::<Result<_>>()?;
        let out_proj = Linear::new(&mut s, "out_proj", di, d)?;
        Ok(MambaBlock { cfg, norm, in_proj, gate_proj, out_proj, branches })
    }

    pub fn new_1d<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: MambaConfig) -> Result<Self> {
        Self::build(b, name, cfg, &["fwd"])
    }

    pub fn new_2d<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: MambaConfig) -> Result<Self> {
        Self::build(b, name, cfg, &["fwd", "bwd"])
    }

    pub fn is_bidirectional(&self) -> bool {
        self.branches.len() == 2
    }

    /// The same block with its two scan directions exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        s.branches.reverse();
        s
    }

    /// `[L, d]` sequences, or `[H, W, d]` grids flattened row-major.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let d = self.cfg.d_model;
        ensure!(
            (shape.len() == 2 || shape.len() == 3) && shape.last() == Some(&d),
            Dimension,
            "mamba block of width {} got {:?}",
            d,
            shape
        );
        ensure!(shape[0] > 0 && x.numel() > 0, Contract, "empty sequence");
        let seq = if shape.len() == 3 { x.reshape(&[shape[0] * shape[1], d])? } else { *x };
        let (y, _) = self.forward_with_state(ctx, &seq, &[])?;
        if shape.len() == 3 {
            y.reshape(&shape)
        } else {
            Ok(y)
        }
    }

    /// Forward over `[L, d]` with optional initial states per branch; also
    /// returns each branch's final state. Reversed branches start from the
    /// sequence end.
    pub fn forward_with_state<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>, h0: &[Option<Var<'a>>]) -> Result<(Var<'a>, Vec<Var<'a>>)> {
        let shape = x.shape();
        ensure!(shape.len() == 2 && shape[1] == self.cfg.d_model, Dimension, "mamba block of width {} got {:?}", self.cfg.d_model, shape);
        ensure!(shape[0] >= 1, Contract, "empty sequence");
        let xn = self.norm.forward(ctx, x)?;
        let u0 = self.in_proj.forward(ctx, &xn)?;
        let gate = self.gate_proj.forward(ctx, &xn)?.silu();
        let mut sum: Option<Var<'a>> = None;
        let mut states = Vec::with_capacity(self.branches.len());
        for (i, br) in self.branches.iter().enumerate() {
            let init = h0.get(i).and_then(|h| h.as_ref());
            let y = if i == 0 {
                let (y, h) = br.forward(ctx, &u0, init)?;
                states.push(h);
                y
            } else {
                let (y, h) = br.forward(ctx, &u0.flip_rows()?, init)?;
                states.push(h);
                y.flip_rows()?
            };
            sum = Some(match sum {
                None => y,
                Some(s) => s.add(&y)?,
            });
        }
        let y = sum.expect("at least one branch").mul(&gate)?;
        Ok((self.out_proj.forward(ctx, &y)?.add(x)?, states))
    }
}
