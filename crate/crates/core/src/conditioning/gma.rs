//! Global-local adapter: four feature scales over the local view and the
//! six cube faces, with scan state carried from the faces into the view.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::geometry::{coord_channels, CoordSource, CubeMap, Face, NFoVView};
use crate::ssm::{global_local_scan, MambaBlock, MambaConfig};
use crate::tensor::nn::{Conv2d, Linear};
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, Tensor, Var};

pub const SCALES: usize = 4;
/// RGB, three ray-direction channels and the validity mask.
pub const INPUT_CHANNELS: usize = 7;
/// Extent of scale `s` (1-based) is the input extent divided by `2^(s+2)`.
pub const FIRST_STRIDE: usize = 8;
/// Input extents must divide by the coarsest stride.
pub const MIN_EXTENT: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GmaConfig {
    /// Feature width per scale.
    pub widths: [usize; SCALES],
    /// Output width per scale, matching the denoiser's encoder stages.
    pub out_widths: [usize; SCALES],
    pub d_state: usize,
    /// 1-based scales whose local features pass through the face chain.
    pub active: Vec<usize>,
}

impl GmaConfig {
    pub fn validate(&self) -> Result<()> {
        for &s in &self.active {
            ensure!((1..=SCALES).contains(&s), Config, "adapter scale {} outside 1..={}", s, SCALES);
        }
        ensure!(self.widths.iter().chain(&self.out_widths).all(|&w| w > 0), Config, "adapter widths must be positive");
        ensure!(self.d_state > 0, Config, "adapter state size must be positive");
        Ok(())
    }

    pub fn is_active(&self, scale: usize) -> bool {
        self.active.contains(&scale)
    }
}

#[derive(Clone, Debug)]
pub struct GmaScale {
    pub stem: Conv2d,
    /// Applied to each image separately.
    pub shared: MambaBlock,
    pub chain: MambaBlock,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Gma {
    pub cfg: GmaConfig,
    pub scales: Vec<GmaScale>,
}

/// Seven `[S, S, 7]` adapter inputs: the faces in chain order, then the view.
pub fn gma_inputs(local: &NFoVView, cube: &CubeMap) -> Result<Vec<Tensor>> {
    let s = local.size();
    ensure!(cube.face_size == s, Dimension, "cube faces are {}x{} but the local view is {}x{}", cube.face_size, cube.face_size, s, s);
    let mut out = Vec::with_capacity(7);
    for f in Face::PRIORITY {
        out.push(augment(cube.face(f), cube.face_mask(f), CoordSource::Face(f))?);
    }
    out.push(augment(&local.image, local.mask.as_ref(), CoordSource::View(local.coords))?);
    Ok(out)
}

fn augment(img: &Tensor, mask: Option<&Tensor>, src: CoordSource) -> Result<Tensor> {
    ensure!(img.rank() == 3 && img.shape()[2] == 3, Dimension, "adapter expects RGB [S, S, 3], got {:?}", img.shape());
    let s = img.shape()[0];
    let coords = coord_channels(src, s)?;
    let mut data = Vec::with_capacity(s * s * INPUT_CHANNELS);
    for i in 0..s * s {
        let known = mask.map_or(1.0, |m| m.data()[i]);
        data.extend(img.data()[i * 3..i * 3 + 3].iter().map(|v| v * known));
        data.extend_from_slice(&coords.data()[i * 3..i * 3 + 3]);
        data.push(known);
    }
    Tensor::new(&[s, s, INPUT_CHANNELS], data)
}

impl Gma {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cfg: GmaConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.sub(name);
        let mut scales = Vec::with_capacity(SCALES);
        let mut cin = INPUT_CHANNELS;
        for k in 0..SCALES {
            let w = cfg.widths[k];
            let mut sc = s.sub(&format!("scale{}", k + 1));
            let (kernel, stride) = if k == 0 { (FIRST_STRIDE, FIRST_STRIDE) } else { (2, 2) };
            let mcfg = MambaConfig::new(w, cfg.d_state);
            scales.push(GmaScale {
                stem: Conv2d::new(&mut sc, "stem", cin, w, kernel, stride, 0)?,
                shared: MambaBlock::new_2d(&mut sc, "shared", mcfg)?,
                chain: MambaBlock::new_1d(&mut sc, "chain", mcfg)?,
                out: Linear::new(&mut sc, "out", w, cfg.out_widths[k])?,
            });
            cin = w;
        }
        Ok(Gma { cfg, scales })
    }

    /// Spatial extent of each output for an `extent`-sized input.
    pub fn output_extents(extent: usize) -> [usize; SCALES] {
        std::array::from_fn(|k| extent / (FIRST_STRIDE << k))
    }

    /// `inputs` as built by [`gma_inputs`]: six faces then the local view.
    /// Returns one `[S/2^(s+2), S/2^(s+2), out_width]` map per scale.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, inputs: &[Tensor]) -> Result<Vec<Var<'a>>> {
        ensure!(inputs.len() == 7, Contract, "adapter takes 7 images, got {}", inputs.len());
        let shape = inputs[0].shape().to_vec();
        ensure!(
            shape.len() == 3 && shape[0] == shape[1] && shape[2] == INPUT_CHANNELS,
            Dimension,
            "adapter inputs must be [S, S, {}], got {:?}",
            INPUT_CHANNELS,
            shape
        );
        ensure!(
            shape[0] >= MIN_EXTENT && shape[0].is_multiple_of(MIN_EXTENT),
            Dimension,
            "adapter input extent {} is not a multiple of {}",
            shape[0],
            MIN_EXTENT
        );
        for x in inputs {
            ensure!(x.shape() == shape, Dimension, "adapter inputs disagree: {:?} vs {:?}", x.shape(), shape);
        }
        let mut feats: Vec<Var<'a>> = inputs.iter().map(|x| ctx.constant(x.clone())).collect();
        let mut outs = Vec::with_capacity(SCALES);
        for (k, sc) in self.scales.iter().enumerate() {
            feats = feats.iter().map(|f| sc.shared.forward(ctx, &sc.stem.forward(ctx, f)?)).collect::<Result<_>>()?;
            let fs = feats[0].shape();
            let (h, w, c) = (fs[0], fs[1], fs[2]);
            let local = if self.cfg.is_active(k + 1) {
                let segments: Vec<Var<'a>> = feats.iter().map(|f| f.reshape(&[h * w, c])).collect::<Result<_>>()?;
                let chained = global_local_scan(ctx, &sc.chain, &segments)?;
                *chained.outputs.last().unwrap()
            } else {
                sc.chain.forward(ctx, &feats[6].reshape(&[h * w, c])?)?
            };
            outs.push(sc.out.forward(ctx, &local)?.reshape(&[h, w, sc.out.d_out])?);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{equirect_to_cubemap, extract_nfov, test_pattern, ViewCoords};
    use crate::rng;
    use crate::tensor::gradcheck::gradcheck_params;
    use crate::tensor::{ParamStore, Tape};

    fn cfg(active: &[usize]) -> GmaConfig {
        GmaConfig { widths: [4, 4, 6, 6], out_widths: [3, 5, 5, 7], d_state: 3, active: active.to_vec() }
    }

    fn build(seed: u64, c: GmaConfig) -> (ParamStore, Gma) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let mut b = ParamBuilder::new(&mut store, &mut r, "");
        let g = Gma::new(&mut b, "gma", c).unwrap();
        (store, g)
    }

    fn inputs(extent: usize) -> Vec<Tensor> {
        let pano = test_pattern(4 * extent, 2 * extent).unwrap();
        let cube = equirect_to_cubemap(&pano, extent).unwrap();
        let view = extract_nfov(&pano, ViewCoords::new(30.0, 10.0, 90.0).unwrap(), extent).unwrap();
        gma_inputs(&view, &cube).unwrap()
    }

    fn run(store: &ParamStore, g: &Gma, xs: &[Tensor]) -> Vec<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        g.forward(&ctx, xs).unwrap().iter().map(|v| v.value().as_ref().clone()).collect()
    }

    #[test]
    fn extents_follow_the_ladder() {
        let (store, g) = build(0, cfg(&[2, 3, 4]));
        for extent in [64, 128] {
            let outs = run(&store, &g, &inputs(extent));
            assert_eq!(outs.len(), 4);
            for (k, o) in outs.iter().enumerate() {
                let e = extent >> (k + 3);
                assert_eq!(o.shape(), &[e, e, g.cfg.out_widths[k]]);
                assert!(o.all_finite());
            }
            assert_eq!(Gma::output_extents(extent), std::array::from_fn(|k| extent >> (k + 3)));
        }
    }

    #[test]
    fn every_active_set_in_the_grid_runs() {
        let xs = inputs(64);
        for active in [vec![4], vec![3, 4], vec![2, 3, 4], vec![1, 2, 3, 4]] {
            let (store, g) = build(1, cfg(&active));
            assert_eq!(run(&store, &g, &xs).len(), 4);
        }
        assert!(cfg(&[0]).validate().is_err());
        assert!(cfg(&[5]).validate().is_err());
    }

    #[test]
    fn face_permutation_reaches_active_scales_only() {
        let (store, g) = build(2, cfg(&[2, 3, 4]));
        let xs = inputs(64);
        let mut swapped = xs.clone();
        swapped.swap(0, 2);
        let a = run(&store, &g, &xs);
        let b = run(&store, &g, &swapped);
        assert_eq!(a[0], b[0]);
        for k in 1..4 {
            assert!(a[k].max_abs_diff(&b[k]) > 1e-9, "scale {}", k + 1);
        }
    }

    #[test]
    fn memoryless_chain_matches_inactive_set() {
        let (mut store, on) = build(3, cfg(&[2, 3, 4]));
        for sc in &on.scales {
            for br in &sc.chain.branches {
                let shape = store.value(br.a_log).shape().to_vec();
                store.set(br.a_log, Tensor::full(&shape, 20.0)).unwrap();
            }
        }
        let off = Gma { cfg: cfg(&[]), scales: on.scales.clone() };
        let xs = inputs(64);
        assert_eq!(run(&store, &on, &xs), run(&store, &off, &xs));
    }

    #[test]
    fn unknown_regions_stay_finite() {
        let (store, g) = build(4, cfg(&[2, 3, 4]));
        let pano = crate::geometry::EquirectImage::blank(256, 128, 3).unwrap();
        let cube = equirect_to_cubemap(&pano, 64).unwrap();
        let view = extract_nfov(&pano, ViewCoords::new(0.0, 0.0, 90.0).unwrap(), 64).unwrap();
        let xs = gma_inputs(&view, &cube).unwrap();
        assert!(xs.iter().all(|x| x.data().chunks(7).all(|p| p[6] == 0.0 && p[..3] == [0.0; 3])));
        for o in run(&store, &g, &xs) {
            assert!(o.data().iter().all(|v| v.is_finite() && v.abs() < 1e3));
        }
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let (store, g) = build(0, cfg(&[2, 3, 4]));
        let mut xs = inputs(64);
        xs[6] = Tensor::zeros(&[128, 128, 7]);
        let tape = Tape::new();
        assert!(g.forward(&Ctx::new(&tape, &store), &xs).is_err());
        assert!(g.forward(&Ctx::new(&tape, &store), &vec![Tensor::zeros(&[32, 32, 7]); 7]).is_err());
        let pano = test_pattern(256, 128).unwrap();
        let cube = equirect_to_cubemap(&pano, 32).unwrap();
        let view = extract_nfov(&pano, ViewCoords::new(0.0, 0.0, 90.0).unwrap(), 64).unwrap();
        assert!(gma_inputs(&view, &cube).is_err());
    }

    #[test]
    fn gradcheck_stage_three_seeds() {
        let xs = inputs(64);
        for seed in 0..3 {
            let (store, g) = build(seed, cfg(&[2, 3, 4]));
            let ids: Vec<_> = store.ids().collect();
            let err = gradcheck_params(&store, &ids, 1e-5, Some(3), &mut rng::seeded(seed), |ctx| {
                let outs = g.forward(ctx, &xs)?;
                let mut loss = outs[0].square().mean_all();
                for o in &outs[1..] {
                    loss = loss.add(&o.square().mean_all())?;
                }
                Ok(loss)
            })
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}
