//! HDR reconstruction from a single LDR image via generated exposure brackets.

pub mod bracket;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod finetune;
pub mod imgio;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod scenes;
pub mod stats;
pub mod tonemap;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
