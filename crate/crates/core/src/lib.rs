//! Desk-scale pipeline for fine-grained visual attribute transfer.
//!
//! The crate covers the full loop: a procedural attribute-controlled image
//! corpus with pixel-level measurement oracles, range-sensitive consistency
//! filtering over a subject hierarchy, a tiny text-conditioned denoising
//! diffusion backbone, a multi-reference adapter with dual cross-attention,
//! two-stage training, and a quantitative evaluation protocol.

pub mod adapter;
pub mod backbone;
pub mod ckpt;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod filter;
pub mod img;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
pub use img::Image;
