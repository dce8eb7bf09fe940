use std::path::Path;

use rand::{Rng, RngExt};

use super::config::RunConfig;
use super::model::Models;
use super::outpaint::CAP_FOV;
use super::synth::corpus;
use crate::conditioning::text_dropout;
use crate::diffusion::{eps_loss, q_sample};
use crate::error::{ensure, Error, Result};
use crate::geometry::{equirect_to_cubemap, extract_nfov, frustum_pixels, EquirectImage, ViewCoords};
use crate::rng;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::optim::AdamW;
use crate::tensor::{Ctx, Tape, Tensor, Var};

/// A panorama with full pixel content whose mask marks what the model may
/// see, the view to denoise, and the prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet {
    pub panorama: EquirectImage,
    pub coords: ViewCoords,
    pub text: String,
}

impl TrainingTriplet {
    pub fn validate(&self) -> Result<()> {
        self.coords.validate()?;
        let mask = self.panorama.mask_or_ones();
        let frustum = frustum_pixels(self.panorama.width(), self.panorama.height(), &self.coords);
        ensure!(
            frustum.iter().zip(mask.data()).any(|(&f, &m)| f && m > 0.5),
            Contract,
            "training view at ({}, {}) sees no known pixel",
            self.coords.lon,
            self.coords.lat
        );
        Ok(())
    }
}

/// Target view and known region mimicking one out-painting step: ring
/// views see a neighbour (sometimes both), cap views see the whole ring.
pub fn make_triplet<R: Rng>(pano: &EquirectImage, caption: &str, cfg: &RunConfig, r: &mut R) -> Result<TrainingTriplet> {
    let (w, h) = (pano.width(), pano.height());
    let step = 360.0 / cfg.n_yaw as f64;
    let mut known = vec![false; w * h];
    let mut add = |c: ViewCoords| {
        for (k, f) in known.iter_mut().zip(frustum_pixels(w, h, &c)) {
            *k |= f;
        }
    };
    let coords = if cfg.include_caps && r.random_bool(0.25) {
        let lon = r.random_range(-180.0..180.0);
        let lat = if r.random_bool(0.5) { 90.0 } else { -90.0 };
        for i in 0..cfg.n_yaw {
            add(ViewCoords::new(crate::geometry::wrap_lon(lon + step * i as f64), 0.0, cfg.view_fov)?);
        }
        if r.random_bool(0.3) {
            add(ViewCoords::new(lon, -lat, CAP_FOV)?);
        }
        ViewCoords::new(lon, lat, CAP_FOV)?
    } else {
        let lon: f64 = r.random_range(-180.0..180.0);
        let lat = r.random_range(-10.0..10.0);
        let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        add(ViewCoords::new(crate::geometry::wrap_lon(lon + side * step), lat, cfg.view_fov)?);
        if r.random_bool(0.4) {
            add(ViewCoords::new(crate::geometry::wrap_lon(lon - side * step), lat, cfg.view_fov)?);
        }
        ViewCoords::new(lon, lat, cfg.view_fov)?
    };
    let mask = Tensor::new(&[h, w], known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())?;
    let t = TrainingTriplet { panorama: EquirectImage::new(pano.pixels.clone(), Some(mask))?, coords, text: caption.to_string() };
    t.validate()?;
    Ok(t)
}

/// Noise-prediction loss on the view of `triplet` at noise level `t` with
/// noise `eps`, without updating anything.
pub fn triplet_loss(models: &Models, triplet: &TrainingTriplet, t: usize, eps: &Tensor, text: &str) -> Result<f64> {
    triplet.validate()?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &models.store);
    let loss = loss_var(models, &ctx, triplet, t, eps, text)?;
    Ok(loss.value().item())
}

fn loss_var<'a>(models: &Models, ctx: &Ctx<'a>, triplet: &TrainingTriplet, t: usize, eps: &Tensor, text: &str) -> Result<Var<'a>> {
    let size = models.cfg.view_size;
    let view = extract_nfov(&triplet.panorama, triplet.coords, size)?;
    let z0 = models.codec.encode(&view.image)?;
    let z_t = q_sample(&z0, t, eps, &models.sched)?;
    let cube = equirect_to_cubemap(&triplet.panorama, size)?;
    let conds = models.cond.condition(ctx, &view, &cube, text)?;
    let eps_hat = models.unet.forward(ctx, &ctx.constant(z_t), t, &conds)?;
    eps_loss(&eps_hat, eps)
}

/// Shape of the latent of one training view.
pub fn latent_shape(cfg: &RunConfig) -> [usize; 3] {
    let e = cfg.view_size / crate::diffusion::latent::FACTOR;
    [e, e, crate::diffusion::latent::LATENT_CHANNELS]
}

/// One optimisation step on one triplet; returns the loss before the update.
pub fn train_step<R: Rng>(models: &mut Models, opt: &mut AdamW, triplet: &TrainingTriplet, r: &mut R) -> Result<f64> {
    triplet.validate()?;
    let t = r.random_range(1..=models.sched.t);
    let eps = rng::normal_tensor(r, &latent_shape(&models.cfg));
    let text = text_dropout(&triplet.text, r);
    let (grads, loss) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &models.store);
        let loss = loss_var(models, &ctx, triplet, t, &eps, text)?;
        let value = loss.value().item();
        ensure!(value.is_finite(), Domain, "training loss is not finite at t = {}", t);
        (tape.backward(loss)?, value)
    };
    opt.step(&mut models.store, &grads.params());
    Ok(loss)
}

/// Training state: models, optimiser, the synthetic corpus and a step
/// counter. Step `k` draws everything from its own random stream, so a
/// resumed run continues exactly where the saved one stopped.
pub struct Trainer {
    pub models: Models,
    pub opt: AdamW,
    pub step: usize,
    pub corpus: Vec<(EquirectImage, String)>,
}

const STEP_RECORD: &str = "trainer.step";

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let models = Models::new(cfg)?;
        let corpus = corpus(cfg.seed, cfg.n_panoramas, cfg.pano_w, cfg.pano_h)?;
        Ok(Trainer { opt: AdamW::new(cfg.adamw()), models, step: 0, corpus })
    }

    pub fn resume(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut tr = Self::new(cfg)?;
        ckpt.restore(&mut tr.models.store)?;
        let step = ckpt.get(STEP_RECORD).ok_or_else(|| Error::Checkpoint("checkpoint has no training step".into()))?;
        tr.step = step.item() as usize;
        tr.opt.load_state(&tr.models.store, &ckpt.records)?;
        tr.models.freeze_encoders(tr.step >= cfg.encoder_warmup_steps);
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.models.checkpoint();
        c.records.extend(self.opt.state_records(&self.models.store));
        c.records.push((STEP_RECORD.to_string(), Tensor::scalar(self.step as f64)));
        c
    }

    pub fn lr(&self) -> f64 {
        self.opt.config.lr
    }

    /// Run step `self.step`, then advance the counter.
    pub fn step_once(&mut self) -> Result<f64> {
        let cfg = self.models.cfg.clone();
        self.models.freeze_encoders(self.step >= cfg.encoder_warmup_steps);
        let mut r = rng::stream(cfg.seed ^ rng::label("train"), self.step as u64);
        let (pano, caption) = &self.corpus[r.random_range(0..self.corpus.len())];
        let triplet = make_triplet(pano, caption, &cfg, &mut r)?;
        let loss = train_step(&mut self.models, &mut self.opt, &triplet, &mut r)?;
        self.step += 1;
        Ok(loss)
    }
}
