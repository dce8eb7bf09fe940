//! Desk-scale 360-degree panorama out-painting.
//!
//! The crate grows a complete equirectangular panorama from a narrow
//! field-of-view seed image and/or a text prompt by repeatedly out-painting
//! perspective views with a small latent diffusion model. Two conditioning
//! modules steer the denoiser:
//!
//! * a visual-textual refiner ([`conditioning::vcr`]) that re-weights the
//!   concatenated cube-face and text context through a stack of selective
//!   state-space blocks, and
//! * a global-local adapter ([`conditioning::gma`]) that carries scan state
//!   from the six cube faces into the local view at four feature scales.
//!
//! Everything runs on the CPU on top of the small autodiff engine in
//! [`tensor`].

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
