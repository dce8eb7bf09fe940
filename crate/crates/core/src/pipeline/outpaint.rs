use std::path::Path;

use rand::RngExt;

use super::config::RunConfig;
use super::model::{Models, ViewDenoiser};
use crate::diffusion::latent::{downsample_mask, LATENT_CHANNELS};
use crate::diffusion::{q_sample_at, sample_with, SampleOptions};
use crate::error::{ensure, Result};
use crate::geometry::io::{save_mask, save_rgb};
use crate::geometry::{composite_nfov, equirect_to_cubemap, extract_nfov, frustum_pixels, wrap_lon, EquirectImage, NFoVView, ViewCoords};
use crate::rng;
use crate::tensor::Tensor;

/// Field of view of the two polar views.
pub const CAP_FOV: f64 = 120.0;
/// Minimum overlap between neighbouring ring views, as a fraction of fov.
pub const MIN_OVERLAP: f64 = 0.25;
/// Resolution at which [`plan_views`] checks coverage.
const COVERAGE_GRID: (usize, usize) = (256, 128);

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPlan {
    pub views: Vec<ViewCoords>,
    /// Overlap of neighbouring ring views as a fraction of their width.
    pub overlap: f64,
}

impl ViewPlan {
    /// Pixels of a `w × h` panorama seen by at least one view.
    pub fn coverage(&self, w: usize, h: usize) -> Vec<bool> {
        let mut seen = vec![false; w * h];
        for v in &self.views {
            for (s, f) in seen.iter_mut().zip(frustum_pixels(w, h, v)) {
                *s |= f;
            }
        }
        seen
    }
}

/// A ring at the start latitude visited outward from `start`
/// (`0, +s, −s, +2s, …` with `s = 360/n_yaw`), then the two polar caps.
pub fn plan_views(start: ViewCoords, fov: f64, n_yaw: usize, include_caps: bool) -> Result<ViewPlan> {
    start.validate()?;
    ensure!(n_yaw >= 1, Contract, "need at least one ring view");
    let spacing = 360.0 / n_yaw as f64;
    let overlap = (fov - spacing) / fov;
    ensure!(
        overlap >= MIN_OVERLAP - 1e-12,
        Contract,
        "{} views of {}° leave {:.0}% overlap, need {:.0}%",
        n_yaw,
        fov,
        overlap * 100.0,
        MIN_OVERLAP * 100.0
    );
    let mut views = Vec::with_capacity(n_yaw + 2);
    for i in 0..n_yaw {
        let k = i.div_ceil(2) as f64;
        let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
        let coords = if i == 0 { start } else { ViewCoords::new(wrap_lon(start.lon + sign * k * spacing), start.lat, fov)? };
        views.push(coords);
    }
    if include_caps {
        views.push(ViewCoords::new(start.lon, 90.0, CAP_FOV)?);
        views.push(ViewCoords::new(start.lon, -90.0, CAP_FOV)?);
        let plan = ViewPlan { views, overlap };
        let (w, h) = COVERAGE_GRID;
        let missing = plan.coverage(w, h).iter().filter(|&&c| !c).count();
        ensure!(missing == 0, Contract, "view plan leaves {} of {} pixels uncovered", missing, w * h);
        return Ok(plan);
    }
    Ok(ViewPlan { views, overlap })
}

/// Fill the unknown part of the view at `coords`. Known latent cells are
/// re-noised to the current level and pasted back after every denoising
/// step; known pixels of the panorama are left untouched.
pub fn outpaint_step(models: &Models, pano: &EquirectImage, coords: ViewCoords, text: &str, opts: SampleOptions) -> Result<EquirectImage> {
    let size = models.cfg.view_size;
    let view = extract_nfov(pano, coords, size)?;
    let vmask = view.mask.clone().unwrap_or_else(|| Tensor::full(&[size, size], 1.0));
    ensure!(vmask.data().iter().any(|&m| m > 0.5), Contract, "view at ({}, {}) has no known pixel to extend", coords.lon, coords.lat);
    fill_view(models, pano, view, vmask, text, opts)
}

fn fill_view(
    models: &Models,
    pano: &EquirectImage,
    view: NFoVView,
    vmask: Tensor,
    text: &str,
    opts: SampleOptions,
) -> Result<EquirectImage> {
    let size = view.size();
    let cube = equirect_to_cubemap(pano, size)?;
    let den = ViewDenoiser::new(models, &view, &cube, text, opts.cfg_scale)?;
    let z_known = models.codec.encode(&view.image)?;
    let lmask = downsample_mask(&vmask)?;
    let shape = [z_known.shape()[0], z_known.shape()[1], LATENT_CHANNELS];
    let any_known = lmask.data().iter().any(|&m| m > 0.5);
    let z = sample_with(&den, &shape, &models.sched, opts, |z, t_prev, r| {
        if !any_known {
            return Ok(());
        }
        let noise = rng::normal_tensor(r, &shape);
        let zk = q_sample_at(&z_known, t_prev, &noise, &models.sched)?;
        let c = LATENT_CHANNELS;
        for (i, &m) in lmask.data().iter().enumerate() {
            if m > 0.5 {
                z.data_mut()[i * c..(i + 1) * c].copy_from_slice(&zk.data()[i * c..(i + 1) * c]);
            }
        }
        Ok(())
    })?;
    let decoded = models.codec.decode(&z)?;
    let mut image = decoded;
    for (i, &m) in vmask.data().iter().enumerate() {
        if m > 0.5 {
            image.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&view.image.data()[i * 3..i * 3 + 3]);
        }
    }
    let out = composite_nfov(pano, &NFoVView::new(view.coords, image, None)?)?;
    Ok(restore_known(pano, out))
}

/// Copy every pixel known in `before` back into `after`.
fn restore_known(before: &EquirectImage, mut after: EquirectImage) -> EquirectImage {
    let Some(mask) = &before.mask else { return before.clone() };
    let c = before.channels();
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            after.pixels.data_mut()[i * c..(i + 1) * c].copy_from_slice(&before.pixels.data()[i * c..(i + 1) * c]);
        }
    }
    after
}

/// Sample a view from the prompt alone and paste it at `coords`.
pub fn initial_view(models: &Models, pano: &EquirectImage, coords: ViewCoords, text: &str, opts: SampleOptions) -> Result<EquirectImage> {
    let size = models.cfg.view_size;
    let view = extract_nfov(pano, coords, size)?;
    fill_view(models, pano, view, Tensor::zeros(&[size, size]), text, opts)
}

pub struct Generation {
    pub panorama: EquirectImage,
    /// One line per out-painted view.
    pub log: Vec<String>,
}

/// Grow a full panorama from a seed view, a prompt, or both.
pub fn generate_panorama(models: &Models, seed_view: Option<&NFoVView>, text: &str, cfg: &RunConfig) -> Result<Generation> {
    ensure!(seed_view.is_some() || !text.trim().is_empty(), Contract, "generation needs a seed view, a prompt, or both");
    let (w, h) = (cfg.pano_w, cfg.pano_h);
    let start = match seed_view {
        Some(v) => ViewCoords::new(v.coords.lon, v.coords.lat, cfg.view_fov)?,
        None => ViewCoords::new(0.0, 0.0, cfg.view_fov)?,
    };
    let plan = plan_views(start, cfg.view_fov, cfg.n_yaw, cfg.include_caps)?;
    let uncovered = plan.coverage(w, h).iter().filter(|&&c| !c).count();
    ensure!(uncovered == 0, Contract, "view plan leaves {} pixels of the {}x{} panorama uncovered", uncovered, w, h);

    let mut seeds = rng::stream(cfg.seed, rng::label("generate"));
    let opts = |seeds: &mut rng::SeededRng| SampleOptions { steps: cfg.sample_steps, cfg_scale: cfg.cfg_scale, seed: seeds.random() };
    let mut pano = EquirectImage::blank(w, h, 3)?;
    let mut log = Vec::new();
    match seed_view {
        Some(v) => {
            pano = composite_nfov(&pano, v)?;
            log.push(format!("seed lon={} lat={} fov={} known={}", v.coords.lon, v.coords.lat, v.coords.fov, pano.known_count()));
        }
        None => {
            pano = initial_view(models, &pano, start, text, opts(&mut seeds))?;
            log.push(format!("initial lon={} lat={} fov={} known={}", start.lon, start.lat, start.fov, pano.known_count()));
        }
    }
    for (i, v) in plan.views.iter().enumerate() {
        let o = opts(&mut seeds);
        let frustum = frustum_pixels(w, h, v);
        let unknown = frustum.iter().enumerate().filter(|&(p, &f)| f && !pano.is_known(p / w, p % w)).count();
        if unknown == 0 {
            log.push(format!("view {i} lon={} lat={} fov={} skipped", v.lon, v.lat, v.fov));
            continue;
        }
        pano = outpaint_step(models, &pano, *v, text, o)?;
        log.push(format!("view {i} lon={} lat={} fov={} filled={} known={}", v.lon, v.lat, v.fov, unknown, pano.known_count()));
    }
    ensure!(pano.unknown_count() == 0, Contract, "{} pixels remain unknown after generation", pano.unknown_count());
    Ok(Generation { panorama: pano, log })
}

/// Write `panorama.png`, `mask.png` and `meta.txt` into `dir`.
pub fn write_outputs(dir: &Path, g: &Generation, cfg: &RunConfig, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_rgb(dir.join("panorama.png"), &g.panorama.pixels)?;
    save_mask(dir.join("mask.png"), &g.panorama.mask_or_ones())?;
    let mut meta = String::new();
    meta.push_str("# config\n");
    meta.push_str(&cfg.to_text());
    meta.push_str("\n# run\n");
    meta.push_str(&format!("seed = {}\ngenerator = \"{}\"\nprompt = {:?}\n", cfg.seed, rng::GENERATOR_NAME, text));
    meta.push_str("\n# steps\n");
    for line in &g.log {
        meta.push_str(line);
        meta.push('\n');
    }
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

#[cfg(test)]
mod tests;
