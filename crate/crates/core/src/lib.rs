//! Prompt-guided adversarial patch generation.
//!
//! A seed latent `z_T` is pushed through a deterministic DDIM sampler
//! conditioned on a text prompt, decoded into a patch, pasted onto person
//! boxes under random physical transforms, and scored by a detector. The
//! latent is optimized with Adam so the patch suppresses detections while two
//! alignment losses keep the cross-attention maps and the final latent close
//! to the ones produced by the initial seed.

pub mod alignment;
pub mod attack;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod optimizer;
pub mod pipeline;
pub mod registry;
pub mod seed;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Graph, Var};
pub use tensor::Tensor;
