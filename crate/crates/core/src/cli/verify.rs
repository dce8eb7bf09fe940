//! Property suites behind `opama verify`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::conditioning::{
    build_clip_condition, gma_inputs, ConditionBundle, Gma, GmaConfig, ToyImageEncoder, ToyTextEncoder, Vcr, Vocab, CLIP_LEN,
};
use crate::diffusion::{cfg_combine, eps_loss, make_schedule, q_sample};
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear, composite_nfov, cubemap_to_equirect, equirect_to_cubemap, extract_nfov, frustum_pixels, psnr_rows, test_pattern, ViewCoords,
};
use crate::rng;
use crate::ssm::{
    discretize_zoh, selective_scan, selective_scan_parallel, selective_scan_seq, zoh, MambaBlock, MambaConfig, ZOH_SERIES_THRESHOLD,
};
use crate::tensor::gradcheck::gradcheck_params;
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, ParamStore, Tape, Tensor, Var};
use crate::unet::{UNet, UNetConfig};

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Scan,
    Grad,
    Geometry,
    Diffusion,
    Vcr,
    Gma,
    All,
}

impl Suite {
    pub const EACH: [Suite; 6] = [Suite::Scan, Suite::Grad, Suite::Geometry, Suite::Diffusion, Suite::Vcr, Suite::Gma];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Scan => "scan",
            Suite::Grad => "grad",
            Suite::Geometry => "geometry",
            Suite::Diffusion => "diffusion",
            Suite::Vcr => "vcr",
            Suite::Gma => "gma",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH.into_iter().chain([Suite::All]).find(|x| x.name() == s).ok_or_else(|| Error::Contract(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{:<10} {:<34} {}  {}", self.suite.name(), self.name, status, self.detail)
    }
}

type Probe = fn() -> Result<(bool, String)>;

fn probes(s: Suite) -> Vec<(&'static str, Probe)> {
    match s {
        Suite::Scan => vec![
            ("parallel_equals_sequential", scan_equivalence as Probe),
            ("zoh_closed_forms", zoh_closed_forms),
            ("zoh_series_continuity", zoh_continuity),
        ],
        Suite::Grad => vec![
            ("mamba_1d_gradcheck", grad_mamba_1d as Probe),
            ("mamba_2d_gradcheck", grad_mamba_2d),
            ("vcr_gradcheck", grad_vcr),
            ("gma_stage_gradcheck", grad_gma),
            ("unet_width8_gradcheck", grad_unet),
        ],
        Suite::Geometry => vec![
            ("cubemap_round_trip_psnr", round_trip_psnr as Probe),
            ("wrap_sample_identity", wrap_identity),
            ("extract_composite_change", extract_composite),
        ],
        Suite::Diffusion => vec![("q_sample_variance", q_variance as Probe), ("cfg_scale_one_identity", cfg_identity)],
        Suite::Vcr => vec![
            ("gate_closed_passes_context", vcr_gate_closed as Probe),
            ("gate_open_passes_refined", vcr_gate_open),
            ("clip_context_shape", clip_shape),
        ],
        Suite::Gma => vec![
            ("output_extents", gma_extents as Probe),
            ("active_set_grid", gma_active_grid),
            ("chained_equals_concatenated", chain_equality),
        ],
        Suite::All => Suite::EACH.iter().flat_map(|&x| probes(x)).collect(),
    }
}

fn suite_of(s: Suite, name: &str) -> Suite {
    if s != Suite::All {
        return s;
    }
    Suite::EACH.into_iter().find(|&x| probes(x).iter().any(|(n, _)| *n == name)).unwrap_or(s)
}

/// Run every property of `suite`. Probes run in parallel on the current
/// rayon pool; the result order is fixed.
pub fn run_suite(suite: Suite) -> Vec<Check> {
    probes(suite)
        .into_par_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (pass, detail) = match f() {
                Ok((p, d)) => (p, format!("{d} ({:.1}s)", start.elapsed().as_secs_f64())),
                Err(e) => (false, format!("error: {e}")),
            };
            Check { suite: suite_of(suite, name), name, pass, detail }
        })
        .collect()
}

fn scan_equivalence() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut r = rng::seeded(11);
    let (d, n) = (8, 16);
    let mut worst: f64 = 0.0;
    for (i, &l) in [1usize, 2, 7, 64, 1024].iter().cycle().take(20).enumerate() {
        let a = rng::uniform_tensor(&mut r, &[d, n], -2.0, -0.2);
        let b = rng::normal_tensor(&mut r, &[l, n]);
        let delta = rng::uniform_tensor(&mut r, &[l, d], 1e-3, 0.5);
        let c = rng::normal_tensor(&mut r, &[l, n]);
        let x = rng::normal_tensor(&mut r, &[l, d]);
        let disc = discretize_zoh(&a, &b, &delta)?;
        let h0 = if i % 2 == 0 { Some(rng::normal_tensor(&mut r, &[d, n])) } else { None };
        let s = selective_scan_seq(&disc, &c, &x, h0.as_ref())?;
        let p = selective_scan_parallel(&disc, &c, &x, h0.as_ref())?;
        worst = worst.max(s.y.max_abs_diff(&p.y)).max(s.h_last.max_abs_diff(&p.h_last));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst <= 1e-10 && secs < 10.0, format!("max_abs_err={worst:.2e} tol=1e-10 wall={secs:.2}s<10s")))
}

fn zoh_closed_forms() -> Result<(bool, String)> {
    let (a1, b1) = zoh(1.0f64, 2f64.ln());
    let (a2, b2) = zoh(-1.0f64, 1.0);
    let e = (-1f64).exp();
    let err = [(a1 - 2.0).abs(), (b1 - 1.0).abs(), (a2 - e).abs(), (b2 - (1.0 - e)).abs()].into_iter().fold(0.0, f64::max);
    Ok((err <= 1e-12, format!("max_err={err:.2e} tol=1e-12")))
}

fn zoh_continuity() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for a in [-3.0, -1.0, -0.1, 0.5, 2.0] {
        let below = zoh(a, ZOH_SERIES_THRESHOLD * 0.999_999);
        let above = zoh(a, ZOH_SERIES_THRESHOLD * 1.000_001);
        worst = worst.max((below.0 - above.0).abs()).max((below.1 - above.1).abs());
    }
    Ok((worst <= 1e-10, format!("jump={worst:.2e} tol=1e-10")))
}

fn three_seeds(f: impl Fn(u64) -> Result<f64>) -> Result<(bool, String)> {
    let errs: Vec<f64> = (0..3).map(f).collect::<Result<_>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok((worst <= GRAD_TOL, format!("rel_err={worst:.2e} tol={GRAD_TOL:.0e} seeds=3")))
}

fn grad_mamba(bidirectional: bool) -> Result<(bool, String)> {
    three_seeds(|seed| {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let mut b = ParamBuilder::new(&mut store, &mut r, "");
        let cfg = MambaConfig::new(4, 3);
        let block = if bidirectional { MambaBlock::new_2d(&mut b, "m", cfg)? } else { MambaBlock::new_1d(&mut b, "m", cfg)? };
        let x = rng::normal_tensor(&mut rng::seeded(seed + 100), &[5, 4]);
        let ids: Vec<_> = store.ids().collect();
        gradcheck_params(&store, &ids, 1e-5, Some(6), &mut rng::seeded(seed), |ctx| {
            Ok(block.forward(ctx, &ctx.constant(x.clone()))?.square().mean_all())
        })
    })
}

fn grad_mamba_1d() -> Result<(bool, String)> {
    grad_mamba(false)
}

fn grad_mamba_2d() -> Result<(bool, String)> {
    grad_mamba(true)
}

fn grad_vcr() -> Result<(bool, String)> {
    three_seeds(|seed| {
        let (store, vcr) = small_vcr(seed, 4)?;
        let c = rng::normal_tensor(&mut rng::seeded(seed + 7), &[CLIP_LEN, 4]);
        let target = rng::normal_tensor(&mut rng::seeded(seed + 8), &[CLIP_LEN, 4]);
        let ids: Vec<_> = store.ids().collect();
        gradcheck_params(&store, &ids, 1e-5, Some(6), &mut rng::seeded(seed), |ctx| {
            let out = vcr.forward(ctx, &ctx.constant(c.clone()))?;
            Ok(out.c_vcr.sub(&ctx.constant(target.clone()))?.square().mean_all())
        })
    })
}

fn small_gma(seed: u64, active: &[usize]) -> Result<(ParamStore, Gma)> {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(seed);
    let cfg = GmaConfig { widths: [4, 4, 6, 6], out_widths: [3, 5, 5, 7], d_state: 3, active: active.to_vec() };
    let g = Gma::new(&mut ParamBuilder::new(&mut store, &mut r, ""), "gma", cfg)?;
    Ok((store, g))
}

fn gma_probe_inputs(extent: usize) -> Result<Vec<Tensor>> {
    let pano = test_pattern(4 * extent, 2 * extent)?;
    let cube = equirect_to_cubemap(&pano, extent)?;
    let view = extract_nfov(&pano, ViewCoords::new(30.0, 10.0, 90.0)?, extent)?;
    gma_inputs(&view, &cube)
}

fn grad_gma() -> Result<(bool, String)> {
    let xs = gma_probe_inputs(64)?;
    three_seeds(|seed| {
        let (store, g) = small_gma(seed, &[2, 3, 4])?;
        let ids: Vec<_> = store.ids().collect();
        gradcheck_params(&store, &ids, 1e-5, Some(3), &mut rng::seeded(seed), |ctx| {
            let outs = g.forward(ctx, &xs)?;
            let mut loss = outs[0].square().mean_all();
            for o in &outs[1..] {
                loss = loss.add(&o.square().mean_all())?;
            }
            Ok(loss)
        })
    })
}

fn grad_unet() -> Result<(bool, String)> {
    let cfg = UNetConfig { channels: [8; 4], d_time: 8, d_ctx: 4, groups: 8, latent_channels: 4, gma_widths: [3; 4] };
    three_seeds(|seed| {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let net = UNet::new(&mut ParamBuilder::new(&mut store, &mut r, ""), "unet", cfg.clone())?;
        for st in &net.encoder {
            let w = rng::normal_tensor(&mut r, store.value(st.inject.weight).shape()).map(|v| 0.3 * v);
            store.set(st.inject.weight, w)?;
        }
        let z = rng::normal_tensor(&mut r, &[16, 16, 4]);
        let c_vcr = rng::normal_tensor(&mut r, &[CLIP_LEN, 4]);
        let c_gma: Vec<Tensor> = UNet::injection_extents(16, 16).iter().map(|&(h, w)| rng::normal_tensor(&mut r, &[h, w, 3])).collect();
        let eps = rng::normal_tensor(&mut r, &[16, 16, 4]);
        let ids: Vec<_> = store.ids().collect();
        gradcheck_params(&store, &ids, 1e-5, Some(2), &mut rng::seeded(seed), |ctx| {
            let bundle =
                ConditionBundle { c_vcr: ctx.constant(c_vcr.clone()), c_gma: c_gma.iter().map(|g| ctx.constant(g.clone())).collect() };
            eps_loss(&net.forward(ctx, &ctx.constant(z.clone()), 17, &bundle)?, &eps)
        })
    })
}

fn round_trip_psnr() -> Result<(bool, String)> {
    let img = test_pattern(256, 128)?;
    let back = cubemap_to_equirect(&equirect_to_cubemap(&img, 64)?, 256, 128)?;
    let psnr = psnr_rows(&img.pixels, &back.pixels, 13..115)?;
    Ok((psnr >= 30.0, format!("psnr={psnr:.2}dB min=30dB")))
}

fn wrap_identity() -> Result<(bool, String)> {
    let img = test_pattern(64, 32)?;
    let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
    let mut exact = true;
    for y in [0.0, 3.3, 17.8, 31.0] {
        for x in [-0.25, -0.5, 0.125, 7.75] {
            bilinear(&img.pixels, x, y, true, &mut a);
            bilinear(&img.pixels, x + 64.0, y, true, &mut b);
            exact &= a == b;
        }
    }
    Ok((exact, "sample(x) == sample(x + W) bitwise".into()))
}

fn extract_composite() -> Result<(bool, String)> {
    let img = test_pattern(256, 128)?;
    let c = ViewCoords::new(30.0, 10.0, 90.0)?;
    let out = composite_nfov(&img, &extract_nfov(&img, c, 64)?)?;
    let inside = frustum_pixels(256, 128, &c);
    let (mut total, mut n) = (0.0, 0usize);
    for (i, &hit) in inside.iter().enumerate() {
        if hit {
            for k in 0..3 {
                total += (img.pixels.data()[i * 3 + k] - out.pixels.data()[i * 3 + k]).abs();
            }
            n += 3;
        }
    }
    let mean = total / n.max(1) as f64;
    Ok((n > 0 && mean <= 2.0 / 255.0, format!("mean_abs={:.3}/255 max=2/255", mean * 255.0)))
}

fn q_variance() -> Result<(bool, String)> {
    let s = make_schedule(1000, 1e-4, 0.02)?;
    let n = 100_000;
    let z0 = Tensor::zeros(&[n]);
    let mut r = rng::seeded(0);
    let mut worst: f64 = 0.0;
    for t in [1, s.t / 2, s.t] {
        let z = q_sample(&z0, t, &rng::normal_tensor(&mut r, &[n]), &s)?;
        let m = z.mean();
        let var = z.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((var / (1.0 - s.alpha_bar(t)) - 1.0).abs());
    }
    Ok((worst <= 0.02, format!("rel_dev={:.2}% max=2% n=1e5", worst * 100.0)))
}

fn cfg_identity() -> Result<(bool, String)> {
    let mut r = rng::seeded(3);
    let c = rng::normal_tensor(&mut r, &[16, 16, 4]);
    let u = rng::normal_tensor(&mut r, &[16, 16, 4]);
    let same = cfg_combine(&c, &u, 1.0)? == c;
    Ok((same, "cfg_combine(c, u, 1) == c bitwise".into()))
}

fn small_vcr(seed: u64, d: usize) -> Result<(ParamStore, Vcr)> {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(seed);
    let vcr = Vcr::new(&mut ParamBuilder::new(&mut store, &mut r, ""), "vcr", MambaConfig::new(d, 4), 2)?;
    Ok((store, vcr))
}

fn gated(bias: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (mut store, vcr) = small_vcr(0, 8)?;
    store.set(vcr.h2.weight, Tensor::zeros(&[vcr.width(), 1]))?;
    store.set(vcr.h2.bias, Tensor::full(&[1], bias))?;
    let c = rng::normal_tensor(&mut rng::seeded(1), &[CLIP_LEN, 8]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let out = vcr.forward(&ctx, &ctx.constant(c.clone()))?;
    Ok((c, out.c_vcr.value().as_ref().clone(), out.c_prime.value().as_ref().clone()))
}

fn vcr_gate_closed() -> Result<(bool, String)> {
    let (c, c_vcr, _) = gated(-1e3)?;
    let err = c_vcr.max_abs_diff(&c);
    Ok((err <= 1e-6, format!("|c_vcr - c_clip|={err:.2e} tol=1e-6")))
}

fn vcr_gate_open() -> Result<(bool, String)> {
    let (_, c_vcr, c_prime) = gated(1e3)?;
    let err = c_vcr.max_abs_diff(&c_prime);
    Ok((err == 0.0, format!("|c_vcr - c'|={err:.2e} exact")))
}

fn clip_shape() -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(0);
    let mut b = ParamBuilder::new(&mut store, &mut r, "");
    let m = MambaConfig::new(8, 2);
    let text = ToyTextEncoder::new(&mut b, "text", Vocab::builtin(), m)?;
    let image = ToyImageEncoder::new(&mut b, "image", m)?;
    let cube = equirect_to_cubemap(&test_pattern(256, 128)?, 64)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let shape = build_clip_condition(&ctx, &text, &image, &cube, "a warm scene with 2 boxes")?.shape();
    Ok((shape == [CLIP_LEN, 8], format!("shape={shape:?} want=[83, 8]")))
}

fn gma_extents() -> Result<(bool, String)> {
    let (store, g) = small_gma(0, &[2, 3, 4])?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let mut ok = true;
    let mut seen = Vec::new();
    for extent in [64, 128] {
        let outs = g.forward(&ctx, &gma_probe_inputs(extent)?)?;
        ok &= outs.len() == 4;
        for (k, o) in outs.iter().enumerate() {
            let e = extent >> (k + 3);
            ok &= o.shape() == [e, e, g.cfg.out_widths[k]];
        }
        seen.push(outs.iter().map(|o| o.shape()[0]).collect::<Vec<_>>());
    }
    Ok((ok, format!("extents 64->{:?} 128->{:?}", seen[0], seen[1])))
}

fn gma_active_grid() -> Result<(bool, String)> {
    let xs = gma_probe_inputs(64)?;
    let mut ok = true;
    for active in [vec![4], vec![3, 4], vec![2, 3, 4], vec![1, 2, 3, 4]] {
        let (store, g) = small_gma(1, &active)?;
        let tape = Tape::new();
        let outs = g.forward(&Ctx::new(&tape, &store), &xs)?;
        ok &= outs.len() == 4 && outs.iter().all(|o| o.value().all_finite());
    }
    ok &= GmaConfig { active: vec![5], ..small_gma(0, &[])?.1.cfg }.validate().is_err();
    Ok((ok, "[4] [3,4] [2,3,4] [1,2,3,4]".into()))
}

/// Seven segments of GMA-like lengths, state handed from one to the next,
/// against one scan over their concatenation.
fn chain_equality() -> Result<(bool, String)> {
    let mut r = rng::seeded(5);
    let (d, n) = (6, 4);
    let lens = [64, 64, 64, 64, 64, 64, 64];
    let l: usize = lens.iter().sum();
    let u = rng::normal_tensor(&mut r, &[l, d]);
    let delta = rng::uniform_tensor(&mut r, &[l, d], 0.01, 0.5);
    let a = rng::uniform_tensor(&mut r, &[d, n], -2.0, -0.1);
    let b = rng::normal_tensor(&mut r, &[l, n]);
    let c = rng::normal_tensor(&mut r, &[l, n]);
    let tape = Tape::new();
    let k = |x: &Tensor| tape.constant(x.clone());
    let (y, h) = selective_scan(&k(&u), &k(&delta), &k(&a), &k(&b), &k(&c), None)?;
    let mut ys: Vec<Var> = Vec::new();
    let mut state: Option<Var> = None;
    let mut at = 0;
    for &len in &lens {
        let part = |x: &Tensor| -> Result<Var> { Ok(k(&x.narrow(at, len)?)) };
        let (yi, hi) = selective_scan(&part(&u)?, &part(&delta)?, &k(&a), &part(&b)?, &part(&c)?, state.as_ref())?;
        ys.push(yi);
        state = Some(hi);
        at += len;
    }
    let joined = Var::concat_rows(&ys)?;
    let exact = *joined.value() == *y.value() && state.is_some_and(|s| *s.value() == *h.value());
    Ok((exact, "7 chained segments == one scan, bitwise".into()))
}
