//! Visual-textual consistency refiner: a gated re-weighting of the joint
//! cube-face and text context.
//!
//! ```text
//! z      = Mamba⁸(c_clip + E)
//! c'     = h₁(z)
//! α      = σ(h₂(z))                  one gate per row
//! c_vcr  = α·c' + (1 − α)·c_clip
//! ```

use rand::Rng;

use super::CLIP_LEN;
use crate::error::{ensure, Result};
use crate::ssm::{MambaBlock, MambaConfig};
use crate::tensor::nn::Linear;
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, ParamId, Var};

#[derive(Clone, Debug)]
pub struct Vcr {
    pub pos_emb: ParamId,
    pub blocks: Vec<MambaBlock>,
    pub h1: Linear,
    pub h2: Linear,
}

pub struct VcrOutput<'a> {
    pub c_vcr: Var<'a>,
    /// `[83, 1]`.
    pub alpha: Var<'a>,
    pub c_prime: Var<'a>,
}

impl Vcr {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: MambaConfig, n_blocks: usize) -> Result<Self> {
        ensure!(n_blocks >= 1, Config, "refiner needs at least one block");
        let d = cfg.d_model;
        let mut s = b.sub(name);
        let pos_emb = s.normal("pos_emb", &[CLIP_LEN, d], 0.02)?;
        let blocks = (0..n_blocks).map(|i| MambaBlock::new_1d(&mut s, &format!("block{i}"), cfg)).collect::<Result<_>>()?;
        let h1 = Linear::new(&mut s, "h1", d, d)?;
        let h2 = Linear::new(&mut s, "h2", d, 1)?;
        Ok(Vcr { pos_emb, blocks, h1, h2 })
    }

    pub fn width(&self) -> usize {
        self.h1.d_in
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, c_clip: &Var<'a>) -> Result<VcrOutput<'a>> {
        let d = self.width();
        ensure!(c_clip.shape() == [CLIP_LEN, d], Dimension, "refiner expects [{}, {}], got {:?}", CLIP_LEN, d, c_clip.shape());
        let mut z = c_clip.add(&ctx.p(self.pos_emb))?;
        for blk in &self.blocks {
            z = blk.forward(ctx, &z)?;
        }
        let c_prime = self.h1.forward(ctx, &z)?;
        let alpha = self.h2.forward(ctx, &z)?.sigmoid();
        let c_vcr = reweight(&alpha, &c_prime, c_clip)?;
        Ok(VcrOutput { c_vcr, alpha, c_prime })
    }
}

/// `α·c' + (1 − α)·c_clip` with `α` of shape `[L, 1]`. Row `i` of the
/// result reads only row `i` of each operand.
pub fn reweight<'a>(alpha: &Var<'a>, c_prime: &Var<'a>, c_clip: &Var<'a>) -> Result<Var<'a>> {
    let shape = c_clip.shape();
    ensure!(shape.len() == 2 && c_prime.shape() == shape, Dimension, "c' {:?} vs c_clip {:?}", c_prime.shape(), shape);
    ensure!(alpha.shape() == [shape[0], 1], Dimension, "gate {:?} for context {:?}", alpha.shape(), shape);
    let a = alpha.expand_last(shape[1])?;
    a.mul(c_prime)?.add(&a.neg().add_scalar(1.0).mul(c_clip)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck::gradcheck_params;
    use crate::tensor::{ParamStore, Tape, Tensor};

    fn build(seed: u64, d: usize, n_blocks: usize) -> (ParamStore, Vcr) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let mut b = ParamBuilder::new(&mut store, &mut r, "");
        let vcr = Vcr::new(&mut b, "vcr", MambaConfig::new(d, 4), n_blocks).unwrap();
        (store, vcr)
    }

    fn force_gate(store: &mut ParamStore, vcr: &Vcr, bias: f64) {
        store.set(vcr.h2.weight, Tensor::zeros(&[vcr.width(), 1])).unwrap();
        store.set(vcr.h2.bias, Tensor::full(&[1], bias)).unwrap();
    }

    #[test]
    fn gate_identities() {
        let (mut store, vcr) = build(0, 8, 2);
        let c = rng::normal_tensor(&mut rng::seeded(1), &[CLIP_LEN, 8]);
        force_gate(&mut store, &vcr, -1e3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = vcr.forward(&ctx, &ctx.constant(c.clone())).unwrap();
        assert!(out.c_vcr.value().max_abs_diff(&c) <= 1e-6);

        force_gate(&mut store, &vcr, 1e3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = vcr.forward(&ctx, &ctx.constant(c)).unwrap();
        assert_eq!(*out.c_vcr.value(), *out.c_prime.value());
    }

    #[test]
    fn gate_stays_open_interval() {
        for seed in 0..5 {
            let (store, vcr) = build(seed, 8, 2);
            let c = rng::normal_tensor(&mut rng::seeded(seed + 50), &[CLIP_LEN, 8]).map(|v| 3.0 * v);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let out = vcr.forward(&ctx, &ctx.constant(c)).unwrap();
            assert!(out.alpha.value().data().iter().all(|&a| a > 0.0 && a < 1.0));
            assert_eq!(out.c_vcr.shape(), vec![CLIP_LEN, 8]);
        }
    }

    #[test]
    fn reweight_is_row_local() {
        let tape = Tape::new();
        let mut r = rng::seeded(4);
        let alpha = tape.constant(rng::uniform_tensor(&mut r, &[5, 1], 0.0, 1.0));
        let cp = tape.constant(rng::normal_tensor(&mut r, &[5, 3]));
        let c = rng::normal_tensor(&mut r, &[5, 3]);
        let base = reweight(&alpha, &cp, &tape.constant(c.clone())).unwrap().value();
        let mut c2 = c.clone();
        for j in 0..3 {
            c2.data_mut()[2 * 3 + j] += 0.5;
        }
        let moved = reweight(&alpha, &cp, &tape.constant(c2)).unwrap().value();
        let a2 = alpha.value().data()[2];
        for i in 0..5 {
            for j in 0..3 {
                let diff = moved.data()[i * 3 + j] - base.data()[i * 3 + j];
                let want = if i == 2 { (1.0 - a2) * 0.5 } else { 0.0 };
                assert!((diff - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_wrong_context_shape() {
        let (store, vcr) = build(0, 8, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        assert!(vcr.forward(&ctx, &ctx.constant(Tensor::zeros(&[82, 8]))).is_err());
        assert!(vcr.forward(&ctx, &ctx.constant(Tensor::zeros(&[83, 7]))).is_err());
    }

    #[test]
    fn gradcheck_three_seeds() {
        for seed in 0..3 {
            let (store, vcr) = build(seed, 4, 2);
            let c = rng::normal_tensor(&mut rng::seeded(seed + 7), &[CLIP_LEN, 4]);
            let target = rng::normal_tensor(&mut rng::seeded(seed + 8), &[CLIP_LEN, 4]);
            let ids: Vec<_> = store.ids().collect();
            let err = gradcheck_params(&store, &ids, 1e-5, Some(6), &mut rng::seeded(seed), |ctx| {
                let out = vcr.forward(ctx, &ctx.constant(c.clone()))?;
                Ok(out.c_vcr.sub(&ctx.constant(target.clone()))?.square().mean_all())
            })
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}
