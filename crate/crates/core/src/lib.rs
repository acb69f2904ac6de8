//! Geometry-guided toy latent diffusion.
//!
//! A small semantic transformer parses structured scene prompts; a parallel
//! spatial transformer reads its hidden states through shared attention and
//! derives a metric-depth map; a depth adapter injects that map into a toy
//! latent diffusion model. Training runs in two stages (geometric
//! pre-training, then joint training) over procedurally generated scenes
//! with analytic ground-truth depth.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod numcore;
pub mod pnm;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
