//! Text- and pose-conditioned motion generation with an instruction-tuned
//! language model.
//!
//! Motions are quantized into discrete codes by a VQ-VAE ([`vqvae`]), the
//! control conditions are rendered into instruction prompts
//! ([`instruct`]), a small decoder-only language model with LoRA adapters is
//! fine-tuned to answer with motion codes ([`lm`]), answers are decoded back
//! into motion ([`generate`]) and scored with the metric suite in [`eval`].

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generate;
pub mod instruct;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod vqvae;

pub use error::{Error, Result};
