//! Desk-scale laboratory for parameter-efficient fine-tuning of point-cloud
//! transformers.
//!
//! The crate contains a small reverse-mode differentiation engine, point
//! cloud geometry (voxel binning, Morton serialization, 3x3x3 stencil
//! neighbor indexing, synthetic scenes), a miniature patch-attention
//! backbone, every PEFT attachment (linear probe, BitFit, bottleneck
//! adapter, LoRA, prompt tuning, and the geometry encoding mixer with its
//! spatial and context adapters), training/evaluation, and op-count
//! instrumentation.

pub mod autograd;
pub mod backbone;
pub mod config_text;
mod error;
pub mod geometry;
pub mod instrumentation;
pub mod params_init;
pub mod peft;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
