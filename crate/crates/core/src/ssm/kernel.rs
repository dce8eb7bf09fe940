use num_traits::Float;
use rayon::prelude::*;

/// Below this `|ΔA|` the ZOH input coefficient uses its first-order limit.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

/// `(Ā, k)` with `B̄ = k·B` for one diagonal entry.
#[inline]
pub fn zoh<F: Float>(a: F, delta: F) -> (F, F) {
    let x = delta * a;
    let a_bar = x.exp();
    let thr = F::from(ZOH_SERIES_THRESHOLD).unwrap();
    let k = if x.abs() < thr { delta } else { x.exp_m1() / a };
    (a_bar, k)
}

#[allow(clippy::too_many_arguments)]
pub fn scan_seq<F: Float>(dims: ScanDims, a_bar: &[F], b_bar: &[F], c: &[F], x: &[F], h0: Option<&[F]>, y: &mut [F], h_last: &mut [F]) {
    let ScanDims { l, d, n } = dims;
    match h0 {
        Some(h) => h_last.copy_from_slice(h),
        None => h_last.fill(F::zero()),
    }
    let h = h_last;
    for t in 0..l {
        let ct = &c[t * n..(t + 1) * n];
        for ch in 0..d {
            let xv = x[t * d + ch];
            let base = (t * d + ch) * n;
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = F::zero();
            for s in 0..n {
                hs[s] = a_bar[base + s] * hs[s] + b_bar[base + s] * xv;
                acc = acc + ct[s] * hs[s];
            }
            y[t * d + ch] = acc;
        }
    }
}

/// `(a₁, b₁) ∘ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`: apply the left map, then the right.
#[inline]
fn combine<F: Float>(a1: F, b1: F, a2: F, b2: F) -> (F, F) {
    (a1 * a2, a2 * b1 + b2)
}

/// Blelloch exclusive scan over `p` (a power of two) steps of `n` lanes.
fn blelloch<F: Float>(ea: &mut [F], eb: &mut [F], p: usize, n: usize) {
    let mut stride = 1;
    while stride < p {
        let mut k = 0;
        while k < p {
            let (j, i) = (k + stride - 1, k + 2 * stride - 1);
            for s in 0..n {
                let (a, b) = combine(ea[j * n + s], eb[j * n + s], ea[i * n + s], eb[i * n + s]);
                ea[i * n + s] = a;
                eb[i * n + s] = b;
            }
            k += 2 * stride;
        }
        stride *= 2;
    }
    for s in 0..n {
        ea[(p - 1) * n + s] = F::one();
        eb[(p - 1) * n + s] = F::zero();
    }
    stride = p / 2;
    while stride >= 1 {
        let mut k = 0;
        while k < p {
            let (j, i) = (k + stride - 1, k + 2 * stride - 1);
            for s in 0..n {
                let (la, lb) = (ea[j * n + s], eb[j * n + s]);
                let (pa, pb) = (ea[i * n + s], eb[i * n + s]);
                ea[j * n + s] = pa;
                eb[j * n + s] = pb;
                let (a, b) = combine(pa, pb, la, lb);
                ea[i * n + s] = a;
                eb[i * n + s] = b;
            }
            k += 2 * stride;
        }
        stride /= 2;
    }
}

/// Same result as [`scan_seq`] through the associative form of the
/// recurrence. Channels run on the rayon pool; each channel's arithmetic is
/// fixed, so the output does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn scan_parallel<F: Float + Send + Sync>(
    dims: ScanDims,
    a_bar: &[F],
    b_bar: &[F],
    c: &[F],
    x: &[F],
    h0: Option<&[F]>,
    y: &mut [F],
    h_last: &mut [F],
) {
    let ScanDims { l, d, n } = dims;
    if l == 0 {
        match h0 {
            Some(h) => h_last.copy_from_slice(h),
            None => h_last.fill(F::zero()),
        }
        return;
    }
    let p = l.next_power_of_two();
    let columns: Vec<(Vec<F>, Vec<F>)> = (0..d)
        .into_par_iter()
        .map(|ch| {
            let mut ea = vec![F::one(); p * n];
            let mut eb = vec![F::zero(); p * n];
            for t in 0..l {
                let base = (t * d + ch) * n;
                let xv = x[t * d + ch];
                for s in 0..n {
                    ea[t * n + s] = a_bar[base + s];
                    eb[t * n + s] = b_bar[base + s] * xv;
                }
            }
            let (oa, ob) = (ea.clone(), eb.clone());
            blelloch(&mut ea, &mut eb, p, n);
            let mut col = vec![F::zero(); l];
            let mut h = vec![F::zero(); n];
            for t in 0..l {
                let mut acc = F::zero();
                for s in 0..n {
                    let i = t * n + s;
                    let (ca, cb) = combine(ea[i], eb[i], oa[i], ob[i]);
                    let start = h0.map_or(F::zero(), |h0| h0[ch * n + s]);
                    h[s] = ca * start + cb;
                    acc = acc + c[t * n + s] * h[s];
                }
                col[t] = acc;
            }
            (col, h)
        })
        .collect();
    for (ch, (col, h)) in columns.into_iter().enumerate() {
        for t in 0..l {
            y[t * d + ch] = col[t];
        }
        h_last[ch * n..(ch + 1) * n].copy_from_slice(&h);
    }
}
