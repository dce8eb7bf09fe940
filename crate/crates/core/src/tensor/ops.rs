//! Differentiable operations on [`Var`].
//!
//! Broadcasting rule for the binary ops: the shapes must be equal, or the
//! shape of one operand must equal a trailing suffix of the other's shape
//! (e.g. `[m, n] ⊕ [n]`, `[h, w, c] ⊕ [c]`, `[h, w, c] ⊕ [w, c]`). The smaller
//! operand is repeated over the leading dimensions. Size-1 stretching is not
//! supported; use [`Var::expand_last`] explicitly.

use super::kernels::{self, ConvGeom};
use super::tape::{GradBuf, Var};
use super::{matmul_dims, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Sigmoid,
    Softplus,
    Silu,
    Neg,
    Reciprocal,
    Square,
    Sqrt,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => silu(x),
            Unary::Neg => -x,
            Unary::Reciprocal => 1.0 / x,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Neg => -1.0,
            Unary::Reciprocal => -y * y,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Output shape and the repeat structure of a trailing-suffix broadcast.
fn broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long.ends_with(short) {
        Ok(long.to_vec())
    } else {
        Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// Sum `g` (length a multiple of `n`) into `n` buckets by `i % n`.
fn fold_into(g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
}

impl<'t> Var<'t> {
    fn node(&self, value: Tensor, inputs: &[usize], backward: impl Fn(&[f64], &mut GradBuf) + 'static) -> Var<'t> {
        let needs = inputs.iter().any(|&i| self.tape.needs_grad(i));
        self.tape.push(value, needs, Some(Box::new(backward)))
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    // --- linear algebra -------------------------------------------------

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        let (ia, ib) = (self.id, other.id);
        Ok(self.node(Tensor::new(&[m, n], out)?, &[ia, ib], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                kernels::gemm_nt(g, b.data(), da, m, n, k);
            }
            if let Some(db) = buf.slot(ib) {
                kernels::gemm_tn(a.data(), g, db, k, m, n);
            }
        }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        ensure!(a.rank() == 2, Dimension, "transpose needs rank 2, got {:?}", a.shape());
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let ia = self.id;
        Ok(self.node(Tensor::new(&[c, r], out)?, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }))
    }

    // --- elementwise ----------------------------------------------------

    fn binary(&self, other: &Var<'t>, op: Binary) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast(a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let (ia, ib) = (self.id, other.id);
        Ok(self.node(Tensor::new(&shape, data)?, &[ia, ib], move |g, buf| {
            let (ad, bd) = (a.data(), b.data());
            if buf.wants(ia) {
                let ga: Vec<f64> = match op {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &v)| v * bd[i % nb]).collect(),
                    Binary::Div => g.iter().enumerate().map(|(i, &v)| v / bd[i % nb]).collect(),
                };
                let slot = buf.slot(ia).unwrap();
                fold_into(&ga, slot);
            }
            if buf.wants(ib) {
                let gb: Vec<f64> = match op {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|v| -v).collect(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &v)| v * ad[i % na]).collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let y = bd[i % nb];
                            -v * ad[i % na] / (y * y)
                        })
                        .collect(),
                };
                let slot = buf.slot(ib).unwrap();
                fold_into(&gb, slot);
            }
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn unary(&self, op: Unary) -> Result<Var<'t>> {
        let x = self.value();
        if op == Unary::Reciprocal && x.data().contains(&0.0) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        if op == Unary::Sqrt && x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("square root of a negative value".into()));
        }
        let y = std::sync::Arc::new(x.map(|v| op.apply(v)));
        let yv = (*y).clone();
        let ia = self.id;
        Ok(self.node(yv, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for (((d, &gv), &xv), &yv) in da.iter_mut().zip(g).zip(x.data()).zip(y.data()) {
                    *d += gv * op.derivative(xv, yv);
                }
            }
        }))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp).expect("exp is total")
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus).expect("softplus is total")
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Unary::Silu).expect("silu is total")
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg).expect("neg is total")
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square).expect("square is total")
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let x = self.value();
        let ia = self.id;
        self.node(x.map(|v| v * s), &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let x = self.value();
        let ia = self.id;
        self.node(x.map(|v| v + s), &[ia], move |g, buf| buf.add(ia, g))
    }

    // --- reductions -----------------------------------------------------

    pub fn sum_all(&self) -> Var<'t> {
        let x = self.value();
        let ia = self.id;
        self.node(Tensor::scalar(x.sum()), &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over the listed axes, dropping them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        for &a in axes {
            ensure!(a < shape.len(), Dimension, "axis {} invalid for shape {:?}", a, shape);
        }
        let out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &n)| n).collect();
        // map[i] = flat output index of input element i
        let map: Vec<usize> = (0..x.numel())
            .map(|mut flat| {
                let mut idx = vec![0; shape.len()];
                for d in (0..shape.len()).rev() {
                    idx[d] = flat % shape[d];
                    flat /= shape[d];
                }
                idx.iter().zip(&shape).enumerate().filter(|(i, _)| !axes.contains(i)).fold(0, |acc, (_, (&i, &n))| acc * n + i)
            })
            .collect();
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in x.data().iter().zip(&map) {
            out[o] += v;
        }
        let ia = self.id;
        Ok(self.node(Tensor::new(&out_shape, out)?, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for (d, &o) in da.iter_mut().zip(&map) {
                    *d += g[o];
                }
            }
        }))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let s = self.sum_axes(axes)?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        Ok(s.scale(1.0 / count as f64))
    }

    // --- shape manipulation ---------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = (*x).clone().reshape(shape)?;
        let ia = self.id;
        Ok(self.node(y, &[ia], move |g, buf| buf.add(ia, g)))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.narrow(start, len)?;
        let row: usize = x.shape()[1..].iter().product();
        let ia = self.id;
        Ok(self.node(y, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for (d, v) in da[start * row..(start + len) * row].iter_mut().zip(g) {
                    *d += v;
                }
            }
        }))
    }

    /// A contiguous run of the flat data viewed with a new shape.
    pub fn slice_flat(&self, offset: usize, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let len: usize = shape.iter().product();
        ensure!(offset + len <= x.numel(), Dimension, "flat slice {}..{} exceeds {} values", offset, offset + len, x.numel());
        let y = Tensor::new(shape, x.data()[offset..offset + len].to_vec())?;
        let ia = self.id;
        Ok(self.node(y, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for (d, v) in da[offset..offset + len].iter_mut().zip(g) {
                    *d += v;
                }
            }
        }))
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        ensure!(!parts.is_empty(), Contract, "concat of zero tensors");
        let first = parts[0].shape();
        ensure!(!first.is_empty(), Dimension, "concat of scalars");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut rows = 0;
        for (p, v) in parts.iter().zip(&values) {
            parts[0].same_tape(p)?;
            ensure!(v.rank() == first.len() && v.shape()[1..] == first[1..], Dimension, "concat of {:?} with {:?}", first, v.shape());
            rows += v.shape()[0];
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let mut data = Vec::with_capacity(shape.iter().product());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        let ids2 = ids.clone();
        Ok(parts[0].node(Tensor::new(&shape, data)?, &ids, move |g, buf| {
            let mut off = 0;
            for (&id, &n) in ids2.iter().zip(&sizes) {
                buf.add(id, &g[off..off + n]);
                off += n;
            }
        }))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        ensure!(!parts.is_empty(), Contract, "concat of zero tensors");
        let first = parts[0].shape();
        ensure!(!first.is_empty(), Dimension, "concat of scalars");
        let lead = &first[..first.len() - 1];
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            parts[0].same_tape(p)?;
            ensure!(v.rank() == first.len() && &v.shape()[..lead.len()] == lead, Dimension, "concat of {:?} with {:?}", first, v.shape());
            widths.push(*v.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ids2 = ids.clone();
        Ok(parts[0].node(Tensor::new(&shape, data)?, &ids, move |g, buf| {
            let mut off = 0;
            for (&id, &w) in ids2.iter().zip(&widths) {
                if let Some(d) = buf.slot(id) {
                    for r in 0..outer {
                        for (o, v) in d[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                            *o += v;
                        }
                    }
                }
                off += w;
            }
        }))
    }

    /// Reverse the order of rows (axis 0).
    pub fn flip_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        ensure!(x.rank() >= 1, Dimension, "flip of a scalar");
        let rows = x.shape()[0];
        let row = x.numel() / rows.max(1);
        let mut data = Vec::with_capacity(x.numel());
        for r in (0..rows).rev() {
            data.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
        }
        let ia = self.id;
        Ok(self.node(Tensor::new(x.shape(), data)?, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for r in 0..rows {
                    let src = (rows - 1 - r) * row;
                    for (d, v) in da[r * row..(r + 1) * row].iter_mut().zip(&g[src..src + row]) {
                        *d += v;
                    }
                }
            }
        }))
    }

    /// Repeat a trailing extent of 1 out to `n`.
    pub fn expand_last(&self, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        ensure!(x.shape().last() == Some(&1), Dimension, "expand_last needs a trailing extent of 1, got {:?}", x.shape());
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let data: Vec<f64> = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let ia = self.id;
        Ok(self.node(Tensor::new(&shape, data)?, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for (d, chunk) in da.iter_mut().zip(g.chunks(n)) {
                    *d += chunk.iter().sum::<f64>();
                }
            }
        }))
    }

    /// Rows of a `[V, d]` table selected by index, giving `[indices.len(), d]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        ensure!(x.rank() == 2, Dimension, "gather_rows needs a [V, d] table, got {:?}", x.shape());
        let (v, d) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::dim(format!("row {bad} out of range for table of {v} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        let ia = self.id;
        Ok(self.node(Tensor::new(&[idx.len(), d], data)?, &[ia], move |g, buf| {
            if let Some(dx) = buf.slot(ia) {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in dx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }))
    }

    // --- normalization and attention ------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'t>> {
        let x = self.value();
        ensure!(x.rank() >= 1, Dimension, "softmax of a scalar");
        let n = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Tensor::new(x.shape(), y)?;
        let saved = y.clone();
        let ia = self.id;
        Ok(self.node(y, &[ia], move |g, buf| {
            if let Some(da) = buf.slot(ia) {
                for ((d, gy), yy) in da.chunks_mut(n).zip(g.chunks(n)).zip(saved.data().chunks(n)) {
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for ((dv, &gv), &yv) in d.iter_mut().zip(gy).zip(yy) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
        }))
    }

    /// Normalize over the last axis, then scale by `gain` and shift by `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let n = *self.shape().last().ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        self.grouped_norm(gain, bias, n, 1, true, eps)
    }

    /// Group normalization of a channels-last `[.., C]` tensor: statistics are
    /// taken over every position and the `C / groups` channels of each group.
    pub fn group_norm(&self, gain: &Var<'t>, bias: &Var<'t>, groups: usize, eps: f64) -> Result<Var<'t>> {
        let c = *self.shape().last().ok_or_else(|| Error::dim("group_norm of a scalar"))?;
        ensure!(groups > 0 && c % groups == 0, Dimension, "{} channels not divisible into {} groups", c, groups);
        self.grouped_norm(gain, bias, c, groups, false, eps)
    }

    /// Shared normalization kernel. Rows of width `c` are split into `groups`
    /// channel groups. With `per_row` each row has its own statistic (layer
    /// norm); otherwise a group's statistic pools all rows (group norm).
    fn grouped_norm(&self, gain: &Var<'t>, bias: &Var<'t>, c: usize, groups: usize, per_row: bool, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        ensure!(gv.shape() == [c] && bv.shape() == [c], Dimension, "norm affine params {:?}/{:?} for width {}", gv.shape(), bv.shape(), c);
        let rows = x.numel() / c;
        let cg = c / groups;
        let n_stats = if per_row { rows } else { groups };
        let stat_of = move |r: usize, ch: usize| if per_row { r } else { ch / cg };
        let count = if per_row { c } else { rows * cg } as f64;

        let xd = x.data();
        let mut mean = vec![0.0; n_stats];
        for r in 0..rows {
            for ch in 0..c {
                mean[stat_of(r, ch)] += xd[r * c + ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n_stats];
        for r in 0..rows {
            for ch in 0..c {
                let d = xd[r * c + ch] - mean[stat_of(r, ch)];
                var[stat_of(r, ch)] += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            for ch in 0..c {
                let s = stat_of(r, ch);
                let i = r * c + ch;
                xhat[i] = (xd[i] - mean[s]) * inv_std[s];
                y[i] = xhat[i] * gv.data()[ch] + bv.data()[ch];
            }
        }
        let (ix, ig, ib) = (self.id, gain.id, bias.id);
        Ok(self.node(Tensor::new(x.shape(), y)?, &[ix, ig, ib], move |g, buf| {
            if let Some(dg) = buf.slot(ig) {
                for (i, (&gy, &xh)) in g.iter().zip(&xhat).enumerate() {
                    dg[i % c] += gy * xh;
                }
            }
            if let Some(db) = buf.slot(ib) {
                fold_into(g, db);
            }
            if buf.wants(ix) {
                let gd = gv.data();
                let mut m1 = vec![0.0; n_stats];
                let mut m2 = vec![0.0; n_stats];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let s = stat_of(r, ch);
                        let dxh = g[i] * gd[ch];
                        m1[s] += dxh;
                        m2[s] += dxh * xhat[i];
                    }
                }
                let dx = buf.slot(ix).unwrap();
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let s = stat_of(r, ch);
                        let dxh = g[i] * gd[ch];
                        dx[i] += inv_std[s] * (dxh - m1[s] / count - xhat[i] * m2[s] / count);
                    }
                }
            }
        }))
    }

    // --- convolution and resampling -------------------------------------

    /// 2-D convolution of a channels-last `[H, W, Cin]` input with weights
    /// `[kh, kw, Cin, Cout]` and bias `[Cout]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        ensure!(x.rank() == 3, Dimension, "conv2d input must be [H, W, C], got {:?}", x.shape());
        ensure!(w.rank() == 4, Dimension, "conv2d weight must be [kh, kw, Cin, Cout], got {:?}", w.shape());
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        ensure!(
            wcin == cin && b.shape() == [cout],
            Dimension,
            "conv2d input {:?} vs weight {:?} / bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        );
        ensure!(stride > 0, Contract, "conv2d stride must be positive");
        ensure!(h + 2 * pad >= kh && wd + 2 * pad >= kw, Dimension, "conv2d kernel {}x{} larger than padded input {:?}", kh, kw, x.shape());
        let geom = ConvGeom { h, w: wd, cin, kh, kw, stride, pad };
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let cols = if direct { None } else { Some(kernels::im2col(x.data(), &geom)) };
        let rows = oh * ow;
        let mut out: Vec<f64> = b.data().iter().cycle().take(rows * cout).cloned().collect();
        let lhs = cols.as_deref().unwrap_or(x.data());
        kernels::gemm_nn(lhs, w.data(), &mut out, rows, pl, cout);
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        Ok(self.node(Tensor::new(&[oh, ow, cout], out)?, &[ix, iw, ib], move |g, buf| {
            let lhs = cols.as_deref().unwrap_or(x.data());
            if let Some(dw) = buf.slot(iw) {
                kernels::gemm_tn(lhs, g, dw, pl, rows, cout);
            }
            if let Some(db) = buf.slot(ib) {
                fold_into(g, db);
            }
            if buf.wants(ix) {
                let mut dcols = vec![0.0; rows * pl];
                kernels::gemm_nt(g, w.data(), &mut dcols, rows, cout, pl);
                let dx = buf.slot(ix).unwrap();
                if direct {
                    for (d, v) in dx.iter_mut().zip(&dcols) {
                        *d += v;
                    }
                } else {
                    kernels::col2im(&dcols, &geom, dx);
                }
            }
        }))
    }

    /// Depthwise causal 1-D convolution over rows of `[L, D]`: output row `t`
    /// sees input rows `t-K+1 ..= t` (zero before the start). Weights `[D, K]`,
    /// bias `[D]`; tap `K-1` multiplies the current row.
    pub fn causal_conv1d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        ensure!(x.rank() == 2, Dimension, "causal_conv1d input must be [L, D], got {:?}", x.shape());
        let (l, d) = (x.shape()[0], x.shape()[1]);
        ensure!(
            w.rank() == 2 && w.shape()[0] == d && b.shape() == [d],
            Dimension,
            "causal_conv1d input {:?} vs weight {:?} / bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        );
        let k = w.shape()[1];
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            for c in 0..d {
                let mut acc = b.data()[c];
                for j in 0..k {
                    if let Some(src) = (t + j + 1).checked_sub(k) {
                        acc += w.data()[c * k + j] * x.data()[src * d + c];
                    }
                }
                y[t * d + c] = acc;
            }
        }
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        Ok(self.node(Tensor::new(&[l, d], y)?, &[ix, iw, ib], move |g, buf| {
            if let Some(db) = buf.slot(ib) {
                fold_into(g, db);
            }
            if let Some(dw) = buf.slot(iw) {
                for t in 0..l {
                    for c in 0..d {
                        for j in 0..k {
                            if let Some(src) = (t + j + 1).checked_sub(k) {
                                dw[c * k + j] += g[t * d + c] * x.data()[src * d + c];
                            }
                        }
                    }
                }
            }
            if let Some(dx) = buf.slot(ix) {
                for t in 0..l {
                    for c in 0..d {
                        for j in 0..k {
                            if let Some(src) = (t + j + 1).checked_sub(k) {
                                dx[src * d + c] += g[t * d + c] * w.data()[c * k + j];
                            }
                        }
                    }
                }
            }
        }))
    }

    /// Nearest-neighbour 2× upsampling of `[H, W, C]`.
    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        ensure!(x.rank() == 3, Dimension, "upsample2x input must be [H, W, C], got {:?}", x.shape());
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / 2) * w + ox / 2) * c;
                let dst = (oy * ow + ox) * c;
                y[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
        let ia = self.id;
        Ok(self.node(Tensor::new(&[oh, ow, c], y)?, &[ia], move |g, buf| {
            if let Some(dx) = buf.slot(ia) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src = ((oy / 2) * w + ox / 2) * c;
                        let dst = (oy * ow + ox) * c;
                        for (d, v) in dx[src..src + c].iter_mut().zip(&g[dst..dst + c]) {
                            *d += v;
                        }
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        assert_eq!(i.matmul(&b).unwrap().value().data(), &[3., 4., 5., 6.]);
        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn unary_scalar_points() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().item(), 0.5);
        assert!((z.softplus().value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(z.silu().value().item(), 0.0);
        assert!(matches!(z.unary(Unary::Reciprocal), Err(Error::Domain(_))));
    }

    #[test]
    fn binary_identities_and_broadcast() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[1., 2., 3.]));
        let z = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(a.add(&z).unwrap().value().data(), &[1., 2., 3.]);
        let p = tape.constant(t(&[2], &[2., 4.]));
        let q = tape.constant(t(&[2], &[2., 2.]));
        assert_eq!(p.div(&q).unwrap().value().data(), &[1., 2.]);

        let m = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(m.add(&a).unwrap().value().data(), &[1., 3., 5., 4., 6., 8.]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(m.add(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[1., 2., 3.]));
        assert_eq!(a.sum_all().value().item(), 6.0);
        let c = tape.constant(Tensor::full(&[2, 5], 7.5));
        assert_eq!(c.mean_all().value().item(), 7.5);
        let m = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(m.sum_axes(&[1]).unwrap().value().data(), &[3., 12.]);
        assert_eq!(m.sum_axes(&[0]).unwrap().value().data(), &[3., 5., 7.]);
        assert!(matches!(m.sum_axes(&[2]), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64 - 1.5));
        let g = tape.backward(p.sum_all()).unwrap();
        assert_eq!(g.wrt(p).unwrap(), &[1.0; 4]);

        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_fn(&[3], |i| i as f64 - 1.0));
        let g = tape.backward(p.square().sum_all()).unwrap();
        assert_eq!(g.wrt(p).unwrap(), &[-2.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_1x1_equals_matmul() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        let w = tape.constant(Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f64).cos()));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = x.conv2d(&w, &b, 1, 0).unwrap().value();
        let x2 = x.value().as_ref().clone().reshape(&[6, 4]).unwrap();
        let w2 = w.value().as_ref().clone().reshape(&[4, 5]).unwrap();
        let want = x2.matmul(&w2).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn causal_conv_only_looks_back() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[1., 0., 0., 0.]));
        let w = tape.constant(t(&[1, 3], &[0.25, 0.5, 1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.causal_conv1d(&w, &b).unwrap().value();
        assert_eq!(y.data(), &[1.0, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn concat_last_interleaves_and_splits_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1., 2.]));
        let b = tape.leaf(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = Var::concat_last(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1., 3., 4., 2., 5., 6.]);
        let w = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let g = tape.backward(c.mul(&w).unwrap().sum_all()).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[1., 4.]);
        assert_eq!(g.wrt(b).unwrap(), &[2., 3., 5., 6.]);
        assert!(Var::concat_last(&[a, tape.constant(Tensor::zeros(&[3, 1]))]).is_err());
    }
}
