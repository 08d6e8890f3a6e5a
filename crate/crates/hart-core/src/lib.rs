//! Desk-scale hybrid autoregressive image generation.
//!
//! The stack decomposes an image's continuous latent into multi-scale
//! discrete tokens plus a continuous residual. Discrete tokens are modeled
//! by a next-scale-prediction transformer with rotary/step embeddings and a
//! KV cache; the residual is modeled by a small per-token diffusion MLP.
//! Everything runs on a self-contained f32 tensor core with reverse-mode
//! autodiff, and an analysis layer provides MAC accounting, attention
//! profiling, and micro-benchmarks.

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod num;
pub mod pipeline;
pub mod tokenizer;
pub mod transformer;

pub use error::{HartError, Result};
pub use num::Tensor;
