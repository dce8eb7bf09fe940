//! Finite-difference verification of tape gradients.
//!
//! Error metric: `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)` with
//! central differences `(f(x + ε eᵢ) − f(x − ε eᵢ)) / 2ε`.

use rand::seq::index;
use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Ctx, Tape, Var};
use super::Tensor;
use crate::error::{ensure, Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    ensure!(eps > 0.0 && eps <= 1e-2, Contract, "gradcheck eps must lie in (0, 1e-2], got {}", eps);
    Ok(())
}

fn scalar_of(v: &Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::contract(format!("gradcheck needs a scalar function, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Check the gradient of a scalar function of one tensor at `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf)?;
    scalar_of(&out)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.wrt(leaf).unwrap_or(&zeros).to_vec();

    let eval = |xp: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(xp);
        scalar_of(&f(&tape, v)?)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Check parameter gradients of a scalar model loss. With `per_param`, only
/// that many randomly chosen coordinates of each parameter are probed.
pub fn gradcheck_params<F, R>(store: &ParamStore, ids: &[ParamId], eps: f64, per_param: Option<usize>, rng: &mut R, f: F) -> Result<f64>
where
    F: for<'a> Fn(&Ctx<'a>) -> Result<Var<'a>>,
    R: Rng,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let out = f(&ctx)?;
    scalar_of(&out)?;
    let grads = tape.backward(out)?;
    let by_param = grads.params();

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s);
        scalar_of(&f(&ctx)?)
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &id in ids {
        let n = store.value(id).numel();
        let analytic: Vec<f64> = by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => index::sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let orig = store.value(id).clone();
        for i in coords {
            let mut t = orig.clone();
            t.data_mut()[i] = orig.data()[i] + eps;
            probe.set(id, t.clone())?;
            let fp = eval(&probe)?;
            t.data_mut()[i] = orig.data()[i] - eps;
            probe.set(id, t)?;
            let fm = eval(&probe)?;
            worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
        }
        probe.set(id, orig)?;
    }
    Ok(worst)
}
