//! Denoising diffusion on latents: linear β schedule, closed-form forward
//! noising, the ε-prediction loss, ancestral sampling over strided
//! timesteps, and classifier-free guidance.
//!
//! Timesteps are 1-based: `t ∈ [1, T]` indexes `β_t`, and `ᾱ_0 = 1`.

pub mod latent;

use crate::error::{ensure, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(t >= 1, Contract, "schedule needs at least one step");
    ensure!(
        0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
        Contract,
        "need 0 < beta_start <= beta_end < 1, got {} and {}",
        beta_start,
        beta_end
    );
    let betas: Vec<f64> =
        (0..t).map(|i| if t == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64 }).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { t, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.t, Contract, "timestep {} outside [1, {}]", t, self.t);
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Descending timesteps visited by a `steps`-step sampler:
    /// `τ_i = ⌊i·T/steps⌋` for `i = steps, …, 1`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        ensure!(steps >= 1 && steps <= self.t, Contract, "sample steps {} outside [1, {}]", steps, self.t);
        Ok((1..=steps).rev().map(|i| i * self.t / steps).collect())
    }
}

/// `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    q_sample_ab(z0, sched.alpha_bar(t), eps)
}

fn q_sample_ab(z0: &Tensor, ab: f64, eps: &Tensor) -> Result<Tensor> {
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| s * z + n * e)
}

/// Noise at an arbitrary level `t ∈ [0, T]`; `t = 0` returns `z₀`.
pub fn q_sample_at(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure!(t <= sched.t, Contract, "timestep {} above {}", t, sched.t);
    if t == 0 {
        ensure!(z0.shape() == eps.shape(), Dimension, "shape mismatch {:?} vs {:?}", z0.shape(), eps.shape());
        return Ok(z0.clone());
    }
    q_sample(z0, t, eps, sched)
}

/// One Markov step `z_t = √(1−β_t)·z_{t−1} + √β_t·ε`.
pub fn q_step(z_prev: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    let (s, n) = ((1.0 - b).sqrt(), b.sqrt());
    z_prev.zip_map(eps, |z, e| s * z + n * e)
}

/// Mean squared error between the injected and predicted noise.
pub fn eps_loss<'a>(eps_hat: &Var<'a>, eps: &Tensor) -> Result<Var<'a>> {
    ensure!(eps_hat.shape() == eps.shape(), Dimension, "prediction {:?} vs noise {:?}", eps_hat.shape(), eps.shape());
    let target = eps_hat.tape().constant(eps.clone());
    Ok(eps_hat.sub(&target)?.square().mean_all())
}

/// Posterior step from `t` down to `t_prev < t`. With `t_prev = t − 1` this
/// is the standard ancestral step; larger gaps use the gap's effective
/// `α = ᾱ_t/ᾱ_prev`. No noise is added when `t_prev = 0` or `noise` is
/// `None`.
pub fn ddpm_step(z_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, sched: &NoiseSchedule, noise: Option<&Tensor>) -> Result<Tensor> {
    sched.check_t(t)?;
    ensure!(t_prev < t, Contract, "step must go down: {} -> {}", t, t_prev);
    ensure!(z_t.shape() == eps_hat.shape(), Dimension, "latent {:?} vs prediction {:?}", z_t.shape(), eps_hat.shape());
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = z_t.zip_map(eps_hat, |z, e| inv * (z - coef * e))?;
    if t_prev > 0 {
        if let Some(n) = noise {
            ensure!(n.shape() == z_t.shape(), Dimension, "noise {:?} vs latent {:?}", n.shape(), z_t.shape());
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            for (o, v) in out.data_mut().iter_mut().zip(n.data()) {
                *o += sigma * v;
            }
        }
    }
    Ok(out)
}

/// `ε_uncond + s·(ε_cond − ε_uncond)`. The scales 1 and 0 return the
/// corresponding branch unchanged.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    ensure!(
        eps_cond.shape() == eps_uncond.shape(),
        Dimension,
        "guidance branches disagree: {:?} vs {:?}",
        eps_cond.shape(),
        eps_uncond.shape()
    );
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_cond.zip_map(eps_uncond, |c, u| u + scale * (c - u))
}

/// A noise predictor with a conditional and an unconditional branch.
pub trait Denoiser {
    fn eps(&self, z_t: &Tensor, t: usize, conditional: bool) -> Result<Tensor>;

    /// Pull a clean-latent estimate back into the data range. The default
    /// leaves it alone.
    fn clip_x0(&self, _x0: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

/// Guided noise prediction; the unconditional branch is skipped at scale 1.
pub fn guided_eps<M: Denoiser + ?Sized>(model: &M, z: &Tensor, t: usize, scale: f64) -> Result<Tensor> {
    let cond = model.eps(z, t, true)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let uncond = model.eps(z, t, false)?;
    cfg_combine(&cond, &uncond, scale)
}

/// The noise implied by the clipped clean estimate
/// `x̂₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
fn clipped_eps<M: Denoiser + ?Sized>(model: &M, z: &Tensor, t: usize, eps: Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut x0 = z.zip_map(&eps, |z, e| (z - n * e) / s)?;
    let before = x0.clone();
    model.clip_x0(&mut x0)?;
    if x0 == before {
        return Ok(eps);
    }
    z.zip_map(&x0, |z, x| (z - s * x) / n)
}

/// Ancestral sampling from `z_T ~ N(0, I)`.
pub fn sample<M: Denoiser + ?Sized>(model: &M, shape: &[usize], sched: &NoiseSchedule, opts: SampleOptions) -> Result<Tensor> {
    sample_with(model, shape, sched, opts, |_, _, _| Ok(()))
}

/// [`sample`] with a hook run after every step on `(z, t_prev, rng)`.
pub fn sample_with<M, H>(model: &M, shape: &[usize], sched: &NoiseSchedule, opts: SampleOptions, mut after_step: H) -> Result<Tensor>
where
    M: Denoiser + ?Sized,
    H: FnMut(&mut Tensor, usize, &mut SeededRng) -> Result<()>,
{
    let ts = sched.strided(opts.steps)?;
    let mut r = rng::stream(opts.seed, rng::label("diffusion.sample"));
    let mut z = rng::normal_tensor(&mut r, shape);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = clipped_eps(model, &z, t, guided_eps(model, &z, t, opts.cfg_scale)?, sched)?;
        let noise = if t_prev > 0 { Some(rng::normal_tensor(&mut r, shape)) } else { None };
        z = ddpm_step(&z, &eps, t, t_prev, sched, noise.as_ref())?;
        after_step(&mut z, t_prev, &mut r)?;
    }
    Ok(z)
}
