use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::GmaConfig;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::tensor::optim::AdamWConfig;
use crate::unet::UNetConfig;

/// Run configuration, read from `key = value` lines. Unknown keys are
/// rejected; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub pano_w: usize,
    pub pano_h: usize,
    pub view_fov: f64,
    /// Pixel extent of every out-painted view and cube face.
    pub view_size: usize,
    pub n_yaw: usize,
    pub include_caps: bool,
    pub gma_active_scales: Vec<usize>,
    pub seed: u64,

    pub d_model: usize,
    pub d_state: usize,
    pub vcr_blocks: usize,
    /// Width of the first U-Net stage; later stages use 2×, 3× and 4×.
    pub unet_width: usize,
    pub d_time: usize,
    pub gma_width: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub encoder_warmup_steps: usize,
    pub n_panoramas: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 25,
            cfg_scale: 2.5,
            pano_w: 128,
            pano_h: 64,
            view_fov: 90.0,
            view_size: 64,
            n_yaw: 6,
            include_caps: true,
            gma_active_scales: vec![2, 3, 4],
            seed: 0,
            d_model: 64,
            d_state: 8,
            vcr_blocks: 8,
            unet_width: 32,
            d_time: 128,
            gma_width: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            encoder_warmup_steps: 200,
            n_panoramas: 64,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.pano_w == 2 * self.pano_h && self.pano_h > 0, Config, "pano_w must be 2 × pano_h");
        ensure!(
            self.view_size >= 64 && self.view_size.is_multiple_of(64),
            Config,
            "view_size {} must be a positive multiple of 64",
            self.view_size
        );
        ensure!(self.view_fov > 0.0 && self.view_fov <= 120.0, Config, "view_fov {} outside (0, 120]", self.view_fov);
        ensure!(self.n_yaw >= 1, Config, "n_yaw must be at least 1");
        ensure!(self.sample_steps >= 1 && self.sample_steps <= self.t, Config, "sample_steps outside [1, T]");
        ensure!(self.cfg_scale.is_finite(), Config, "cfg_scale must be finite");
        ensure!(self.lr > 0.0 && self.weight_decay >= 0.0, Config, "lr must be positive and weight_decay non-negative");
        ensure!(self.n_panoramas >= 1, Config, "n_panoramas must be at least 1");
        ensure!(self.d_model > 0 && self.d_state > 0 && self.gma_width > 0, Config, "model widths must be positive");
        self.gma().validate()?;
        self.unet().validate()?;
        make_schedule(self.t, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t, self.beta_start, self.beta_end)
    }

    pub fn unet(&self) -> UNetConfig {
        let mut u = UNetConfig::ladder(self.unet_width, self.d_model);
        u.d_time = self.d_time;
        u
    }

    pub fn gma(&self) -> GmaConfig {
        let w = self.gma_width;
        GmaConfig {
            widths: [w, w, 2 * w, 2 * w],
            out_widths: self.unet().channels,
            d_state: self.d_state,
            active: self.gma_active_scales.clone(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}
