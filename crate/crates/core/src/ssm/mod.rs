//! Selective state-space kernels and the Mamba blocks built on them.
//!
//! Shapes: `A` is `[D, N]` (diagonal per channel), selective `B`/`C` are
//! `[L, N]`, step sizes `Δ` are `[L, D]`, inputs and outputs `[L, D]`, and
//! discretized operands `[L, D, N]`. The recurrence per channel `d` and
//! state `n` is `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = Σ_n C_t h_t`.

pub mod bench;
mod block;
mod global_local;
mod kernel;
mod op;

pub use block::{MambaBlock, MambaConfig, ScanBranch};
pub use global_local::{global_local_scan, ChainOutput};
pub use kernel::{scan_parallel, scan_seq, zoh, ScanDims, ZOH_SERIES_THRESHOLD};
pub use op::selective_scan;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Continuous selective-scan operands.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, N]`, strictly negative for a stable system.
    pub a: Tensor,
    /// `[L, N]`
    pub b_sel: Tensor,
    /// `[L, N]`
    pub c_sel: Tensor,
    /// `[L, D]`, strictly positive.
    pub delta: Tensor,
}

/// Zero-order-hold discretization of [`SsmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    /// `[L, D, N]`
    pub a_bar: Tensor,
    /// `[L, D, N]`
    pub b_bar: Tensor,
}

impl DiscreteSsm {
    pub fn dims(&self) -> ScanDims {
        let s = self.a_bar.shape();
        ScanDims { l: s[0], d: s[1], n: s[2] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    /// `[L, D]`
    pub y: Tensor,
    /// `[D, N]`
    pub h_last: Tensor,
}

/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`, elementwise on the diagonal.
pub fn discretize_zoh(a: &Tensor, b_sel: &Tensor, delta: &Tensor) -> Result<DiscreteSsm> {
    ensure!(a.rank() == 2, Dimension, "A must be [D, N], got {:?}", a.shape());
    let (d, n) = (a.shape()[0], a.shape()[1]);
    ensure!(delta.rank() == 2 && delta.shape()[1] == d, Dimension, "delta must be [L, {}], got {:?}", d, delta.shape());
    let l = delta.shape()[0];
    ensure!(b_sel.shape() == [l, n], Dimension, "B must be [{}, {}], got {:?}", l, n, b_sel.shape());
    ensure!(delta.data().iter().all(|&v| v > 0.0), Contract, "step sizes must be strictly positive");
    let mut a_bar = vec![0.0; l * d * n];
    let mut b_bar = vec![0.0; l * d * n];
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            for s in 0..n {
                let (ab, coef) = zoh(a.data()[c * n + s], dt);
                let i = (t * d + c) * n + s;
                a_bar[i] = ab;
                b_bar[i] = coef * b_sel.data()[t * n + s];
            }
        }
    }
    Ok(DiscreteSsm { a_bar: Tensor::new(&[l, d, n], a_bar)?, b_bar: Tensor::new(&[l, d, n], b_bar)? })
}

fn check_scan(disc: &DiscreteSsm, c_sel: &Tensor, x: &Tensor, h0: Option<&Tensor>) -> Result<ScanDims> {
    ensure!(disc.a_bar.rank() == 3, Dimension, "discrete operands must be [L, D, N]");
    ensure!(disc.a_bar.shape() == disc.b_bar.shape(), Dimension, "Ā {:?} vs B̄ {:?}", disc.a_bar.shape(), disc.b_bar.shape());
    let dims = disc.dims();
    ensure!(c_sel.shape() == [dims.l, dims.n], Dimension, "C must be [{}, {}], got {:?}", dims.l, dims.n, c_sel.shape());
    ensure!(x.shape() == [dims.l, dims.d], Dimension, "input must be [{}, {}], got {:?}", dims.l, dims.d, x.shape());
    if let Some(h) = h0 {
        ensure!(h.shape() == [dims.d, dims.n], Dimension, "initial state must be [{}, {}]", dims.d, dims.n);
    }
    Ok(dims)
}

type ScanKernel = fn(ScanDims, &[f64], &[f64], &[f64], &[f64], Option<&[f64]>, &mut [f64], &mut [f64]);

fn run_scan(disc: &DiscreteSsm, c_sel: &Tensor, x: &Tensor, h0: Option<&Tensor>, kernel: ScanKernel) -> Result<ScanOutput> {
    let dims = check_scan(disc, c_sel, x, h0)?;
    let mut y = vec![0.0; dims.l * dims.d];
    let mut h = vec![0.0; dims.d * dims.n];
    kernel(dims, disc.a_bar.data(), disc.b_bar.data(), c_sel.data(), x.data(), h0.map(|t| t.data()), &mut y, &mut h);
    Ok(ScanOutput { y: Tensor::new(&[dims.l, dims.d], y)?, h_last: Tensor::new(&[dims.d, dims.n], h)? })
}

/// Step-by-step recurrence; the reference for every other scan.
pub fn selective_scan_seq(disc: &DiscreteSsm, c_sel: &Tensor, x: &Tensor, h0: Option<&Tensor>) -> Result<ScanOutput> {
    run_scan(disc, c_sel, x, h0, scan_seq::<f64>)
}

/// Work-efficient up/down-sweep scan, parallel over channels.
pub fn selective_scan_parallel(disc: &DiscreteSsm, c_sel: &Tensor, x: &Tensor, h0: Option<&Tensor>) -> Result<ScanOutput> {
    run_scan(disc, c_sel, x, h0, scan_parallel::<f64>)
}
