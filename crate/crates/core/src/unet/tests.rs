use super::*;
use crate::diffusion::eps_loss;
use crate::rng;
use crate::tensor::gradcheck::gradcheck_params;
use crate::tensor::{ParamStore, Tape};

fn small_cfg() -> UNetConfig {
    UNetConfig { channels: [8, 8, 8, 8], d_time: 8, d_ctx: 4, groups: 8, latent_channels: 4, gma_widths: [3, 3, 3, 3] }
}

fn build(seed: u64, cfg: UNetConfig) -> (ParamStore, UNet) {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(seed);
    let mut b = ParamBuilder::new(&mut store, &mut r, "");
    let net = UNet::new(&mut b, "unet", cfg).unwrap();
    (store, net)
}

struct Inputs {
    z: Tensor,
    c_vcr: Tensor,
    c_gma: Vec<Tensor>,
}

fn inputs(seed: u64, cfg: &UNetConfig, h: usize, w: usize) -> Inputs {
    let mut r = rng::seeded(seed);
    Inputs {
        z: rng::normal_tensor(&mut r, &[h, w, cfg.latent_channels]),
        c_vcr: rng::normal_tensor(&mut r, &[83, cfg.d_ctx]),
        c_gma: UNet::injection_extents(h, w)
            .iter()
            .zip(cfg.gma_widths)
            .map(|(&(eh, ew), c)| rng::normal_tensor(&mut r, &[eh, ew, c]))
            .collect(),
    }
}

fn bundle<'a>(ctx: &Ctx<'a>, x: &Inputs) -> ConditionBundle<'a> {
    ConditionBundle { c_vcr: ctx.constant(x.c_vcr.clone()), c_gma: x.c_gma.iter().map(|g| ctx.constant(g.clone())).collect() }
}

fn eval(store: &ParamStore, net: &UNet, x: &Inputs, t: usize) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let z = ctx.constant(x.z.clone());
    net.forward(&ctx, &z, t, &bundle(&ctx, x)).unwrap().value().as_ref().clone()
}

#[test]
fn sinusoid_base_pattern_and_distinctness() {
    let e = sinusoidal(0.0, 16);
    assert!(e.data()[..8].iter().all(|&v| v == 0.0));
    assert!(e.data()[8..].iter().all(|&v| v == 1.0));
    let embs: Vec<Tensor> = (0..10_000).map(|t| sinusoidal(t as f64, 128)).collect();
    for w in embs.windows(2) {
        assert!(w[0].max_abs_diff(&w[1]) > 1e-6);
    }
    // coarse collision scan: distinct first-frequency phase ordering
    let mut keys: Vec<Vec<i64>> = embs.iter().map(|e| e.data().iter().map(|v| (v * 1e6).round() as i64).collect()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 10_000);
}

#[test]
fn time_embedding_width() {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(0);
    let mut b = ParamBuilder::new(&mut store, &mut r, "");
    let te = TimeEmbed::new(&mut b, "t", 128).unwrap();
    let tape = Tape::new();
    assert_eq!(te.forward(&Ctx::new(&tape, &store), 500).unwrap().shape(), vec![1, 128]);
}

#[test]
fn output_shape_matches_latent() {
    let cfg = UNetConfig::ladder(32, 16);
    let (store, net) = build(0, cfg.clone());
    let x = inputs(1, &cfg, 32, 32);
    let out = eval(&store, &net, &x, 10);
    assert_eq!(out.shape(), &[32, 32, 4]);
    assert!(out.all_finite());
    let x = inputs(2, &cfg, 16, 32);
    assert_eq!(eval(&store, &net, &x, 10).shape(), &[16, 32, 4]);
}

#[test]
fn zero_init_injection_ignores_adapter() {
    let cfg = small_cfg();
    let (store, net) = build(3, cfg.clone());
    let a = inputs(4, &cfg, 16, 16);
    let mut b = inputs(4, &cfg, 16, 16);
    b.c_gma = inputs(5, &cfg, 16, 16).c_gma;
    assert_eq!(eval(&store, &net, &a, 7), eval(&store, &net, &b, 7));
}

#[test]
fn context_and_adapter_are_live_once_weights_move() {
    let cfg = small_cfg();
    let (mut store, net) = build(6, cfg.clone());
    let a = inputs(7, &cfg, 16, 16);
    let mut b = inputs(7, &cfg, 16, 16);
    b.c_vcr = inputs(8, &cfg, 16, 16).c_vcr;
    assert!(eval(&store, &net, &a, 3).max_abs_diff(&eval(&store, &net, &b, 3)) > 1e-9);
    for st in &net.encoder {
        let w = rng::normal_tensor(&mut rng::seeded(9), store.value(st.inject.weight).shape());
        store.set(st.inject.weight, w).unwrap();
    }
    let mut c = inputs(7, &cfg, 16, 16);
    c.c_gma = inputs(10, &cfg, 16, 16).c_gma;
    assert!(eval(&store, &net, &a, 3).max_abs_diff(&eval(&store, &net, &c, 3)) > 1e-9);
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_cfg();
    let (store, net) = build(11, cfg.clone());
    let x = inputs(12, &cfg, 16, 16);
    assert_eq!(eval(&store, &net, &x, 40), eval(&store, &net, &x, 40));
}

#[test]
fn misaligned_conditions_are_rejected() {
    let cfg = small_cfg();
    let (store, net) = build(0, cfg.clone());
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let mut x = inputs(1, &cfg, 16, 16);
    x.c_gma[2] = Tensor::zeros(&[4, 4, 3]);
    let z = ctx.constant(x.z.clone());
    assert!(net.forward(&ctx, &z, 1, &bundle(&ctx, &x)).is_err());
    let x = inputs(1, &cfg, 16, 16);
    let bad = ctx.constant(Tensor::zeros(&[8, 8, 4]));
    assert!(net.forward(&ctx, &bad, 1, &bundle(&ctx, &x)).is_err());
    assert!(UNetConfig { groups: 3, ..cfg }.validate().is_err());
}

#[test]
fn gradcheck_width_8_three_seeds() {
    let cfg = small_cfg();
    for seed in 0..3 {
        let (mut store, net) = build(seed, cfg.clone());
        // move the zero-initialized projections off zero so every path is probed
        for st in &net.encoder {
            let w = rng::normal_tensor(&mut rng::seeded(seed + 100), store.value(st.inject.weight).shape()).map(|v| 0.3 * v);
            store.set(st.inject.weight, w).unwrap();
        }
        let x = inputs(seed + 20, &cfg, 16, 16);
        let eps = rng::normal_tensor(&mut rng::seeded(seed + 30), &[16, 16, 4]);
        let ids: Vec<_> = store.ids().collect();
        let err = gradcheck_params(&store, &ids, 1e-5, Some(2), &mut rng::seeded(seed), |ctx| {
            let z = ctx.constant(x.z.clone());
            eps_loss(&net.forward(ctx, &z, 17, &bundle(ctx, &x))?, &eps)
        })
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}
