//! Synthetic data, training and the iterative out-painting loop.

pub mod config;
pub mod model;
pub mod outpaint;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use model::{FrozenConditions, Models, ViewDenoiser};
pub use outpaint::{generate_panorama, initial_view, outpaint_step, plan_views, write_outputs, Generation, ViewPlan};
pub use synth::{synth_panorama, SynthSceneSpec};
pub use train::{make_triplet, train_step, triplet_loss, Trainer, TrainingTriplet};
