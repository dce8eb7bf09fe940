//! Timing harness for the scan kernels.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_traits::Float;
use rand::{Rng, RngExt};

use super::kernel::{scan_parallel, scan_seq, zoh, ScanDims};
use crate::error::{ensure, Error, Result};
use crate::rng;

pub const CSV_HEADER: &str = "L,N,D,variant,wall_ns,max_abs_err";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Seq,
    Parallel,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Seq => "seq",
            Variant::Parallel => "parallel",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Variant::Seq),
            "parallel" => Ok(Variant::Parallel),
            _ => Err(Error::contract(format!("unknown scan variant {s:?} (expected seq or parallel)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub dims: ScanDims,
    pub variant: Variant,
    pub wall_ns: u128,
    /// Against the 64-bit sequential recurrence on the same operands.
    pub max_abs_err: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{:e}", self.dims.l, self.dims.n, self.dims.d, self.variant, self.wall_ns, self.max_abs_err)
    }
}

/// Random stable operands: `A ∈ [−2, −0.5]`, `Δ ∈ [1e-3, 0.1]`, unit-scale
/// `B`, `C`, `x`.
pub struct Operands {
    pub dims: ScanDims,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
}

impl Operands {
    pub fn random<R: Rng>(dims: ScanDims, rng: &mut R) -> Self {
        let ScanDims { l, d, n } = dims;
        let a: Vec<f64> = (0..d * n).map(|_| rng.random_range(-2.0..-0.5)).collect();
        let delta: Vec<f64> = (0..l * d).map(|_| rng.random_range(1e-3..0.1)).collect();
        let b: Vec<f64> = (0..l * n).map(|_| rng::normal(rng)).collect();
        let c = (0..l * n).map(|_| rng::normal(rng)).collect();
        let x = (0..l * d).map(|_| rng::normal(rng)).collect();
        let mut a_bar = vec![0.0; l * d * n];
        let mut b_bar = vec![0.0; l * d * n];
        for t in 0..l {
            for ch in 0..d {
                for s in 0..n {
                    let (ab, k) = zoh(a[ch * n + s], delta[t * d + ch]);
                    a_bar[(t * d + ch) * n + s] = ab;
                    b_bar[(t * d + ch) * n + s] = k * b[t * n + s];
                }
            }
        }
        Operands { dims, a_bar, b_bar, c, x }
    }

    pub fn oracle(&self) -> Vec<f64> {
        let ScanDims { l, d, n } = self.dims;
        let mut y = vec![0.0; l * d];
        let mut h = vec![0.0; d * n];
        scan_seq(self.dims, &self.a_bar, &self.b_bar, &self.c, &self.x, None, &mut y, &mut h);
        y
    }

    fn run<F: Float + Send + Sync>(&self, variant: Variant) -> (u128, Vec<f64>) {
        let ScanDims { l, d, n } = self.dims;
        let cast = |v: &[f64]| -> Vec<F> { v.iter().map(|&x| F::from(x).unwrap()).collect() };
        let (a, b, c, x) = (cast(&self.a_bar), cast(&self.b_bar), cast(&self.c), cast(&self.x));
        let mut y = vec![F::zero(); l * d];
        let mut h = vec![F::zero(); d * n];
        let start = Instant::now();
        match variant {
            Variant::Seq => scan_seq(self.dims, &a, &b, &c, &x, None, &mut y, &mut h),
            Variant::Parallel => scan_parallel(self.dims, &a, &b, &c, &x, None, &mut y, &mut h),
        }
        let ns = start.elapsed().as_nanos();
        (ns, y.iter().map(|v| v.to_f64().unwrap()).collect())
    }
}

pub fn bench_scan(dims: ScanDims, variant: Variant, precision: Precision, seed: u64) -> Result<BenchRow> {
    ensure!(dims.l >= 1 && dims.n >= 1 && dims.d >= 1, Contract, "scan sizes must be at least 1, got {:?}", dims);
    let mut r = rng::stream(seed, rng::label("bench.scan"));
    let ops = Operands::random(dims, &mut r);
    let oracle = ops.oracle();
    let (wall_ns, y) = match precision {
        Precision::F64 => ops.run::<f64>(variant),
        Precision::F32 => ops.run::<f32>(variant),
    };
    let max_abs_err = y.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(BenchRow { dims, variant, wall_ns, max_abs_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_column_order() {
        let dims = ScanDims { l: 1, n: 2, d: 3 };
        let row = bench_scan(dims, Variant::Parallel, Precision::F64, 1).unwrap();
        let csv = row.csv();
        let cols: Vec<&str> = csv.split(',').collect();
        assert_eq!(&cols[..4], &["1", "2", "3", "parallel"]);
        assert_eq!(cols.len(), CSV_HEADER.split(',').count());
        assert!(row.max_abs_err <= 1e-10);
    }

    #[test]
    fn single_precision_stays_close() {
        let dims = ScanDims { l: 257, n: 4, d: 3 };
        for v in [Variant::Seq, Variant::Parallel] {
            let row = bench_scan(dims, v, Precision::F32, 9).unwrap();
            assert!(row.max_abs_err <= 1e-5, "{v}: {}", row.max_abs_err);
        }
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(bench_scan(ScanDims { l: 0, n: 1, d: 1 }, Variant::Seq, Precision::F64, 0).is_err());
        assert!("fast".parse::<Variant>().is_err());
    }
}
