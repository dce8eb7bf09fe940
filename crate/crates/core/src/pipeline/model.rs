use super::config::RunConfig;
use crate::conditioning::{ConditionBundle, Conditioner, Gma, ToyImageEncoder, ToyTextEncoder, Vcr, Vocab};
use crate::diffusion::latent::LatentCodec;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::geometry::{CubeMap, NFoVView};
use crate::rng;
use crate::ssm::MambaConfig;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::params::ParamBuilder;
use crate::tensor::{Ctx, ParamStore, Tape, Tensor};
use crate::unet::UNet;

/// Parameter scopes of the two encoders.
pub const ENCODER_SCOPES: [&str; 2] = ["text.", "image."];

/// Every trainable piece plus the fixed codec and schedule.
#[derive(Clone, Debug)]
pub struct Models {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub cond: Conditioner,
    pub unet: UNet,
    pub codec: LatentCodec,
    pub sched: NoiseSchedule,
}

/// Conditions evaluated once and reused across denoising steps.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenConditions {
    pub c_vcr: Tensor,
    pub c_gma: Vec<Tensor>,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, rng::label("init"));
        let mut b = ParamBuilder::new(&mut store, &mut r, "");
        let m = MambaConfig::new(cfg.d_model, cfg.d_state);
        let cond = Conditioner {
            text: ToyTextEncoder::new(&mut b, "text", Vocab::builtin(), m)?,
            image: ToyImageEncoder::new(&mut b, "image", m)?,
            vcr: Vcr::new(&mut b, "vcr", m, cfg.vcr_blocks)?,
            gma: Gma::new(&mut b, "gma", cfg.gma())?,
        };
        let unet = UNet::new(&mut b, "unet", cfg.unet())?;
        Ok(Models { cfg: cfg.clone(), store, cond, unet, codec: LatentCodec::default(), sched: cfg.schedule()? })
    }

    /// Architecture from `cfg`, weights from `ckpt`.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        ckpt.restore(&mut m.store)?;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn freeze_encoders(&mut self, frozen: bool) {
        for scope in ENCODER_SCOPES {
            self.store.set_frozen(scope, frozen);
        }
    }

    pub fn encoders_frozen(&self) -> bool {
        self.store.iter().filter(|(_, p)| ENCODER_SCOPES.iter().any(|s| p.name.starts_with(s))).all(|(_, p)| p.frozen)
    }

    pub fn conditions(&self, view: &NFoVView, cube: &CubeMap, text: &str) -> Result<FrozenConditions> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let b = self.cond.condition(&ctx, view, cube, text)?;
        Ok(FrozenConditions {
            c_vcr: b.c_vcr.value().as_ref().clone(),
            c_gma: b.c_gma.iter().map(|g| g.value().as_ref().clone()).collect(),
        })
    }

    pub fn eps(&self, z_t: &Tensor, t: usize, conds: &FrozenConditions) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let bundle = ConditionBundle {
            c_vcr: ctx.constant(conds.c_vcr.clone()),
            c_gma: conds.c_gma.iter().map(|g| ctx.constant(g.clone())).collect(),
        };
        let out = self.unet.forward(&ctx, &ctx.constant(z_t.clone()), t, &bundle)?;
        Ok(out.value().as_ref().clone())
    }
}

/// The denoiser for one view: prompt conditions and their empty-prompt
/// counterpart for guidance.
pub struct ViewDenoiser<'m> {
    pub models: &'m Models,
    pub cond: FrozenConditions,
    pub uncond: Option<FrozenConditions>,
}

impl<'m> ViewDenoiser<'m> {
    /// The empty-prompt branch is only evaluated when guidance needs it.
    pub fn new(models: &'m Models, view: &NFoVView, cube: &CubeMap, text: &str, cfg_scale: f64) -> Result<Self> {
        let cond = models.conditions(view, cube, text)?;
        let uncond = if cfg_scale == 1.0 {
            None
        } else if text.is_empty() {
            Some(cond.clone())
        } else {
            Some(models.conditions(view, cube, "")?)
        };
        Ok(ViewDenoiser { models, cond, uncond })
    }
}

impl Denoiser for ViewDenoiser<'_> {
    fn eps(&self, z_t: &Tensor, t: usize, conditional: bool) -> Result<Tensor> {
        let c = if conditional { &self.cond } else { self.uncond.as_ref().unwrap_or(&self.cond) };
        self.models.eps(z_t, t, c)
    }

    fn clip_x0(&self, x0: &mut Tensor) -> Result<()> {
        self.models.codec.project(x0)
    }
}
