//! Generation-order laboratory for masked diffusion language models.
//!
//! The crate trains a tiny bidirectional denoiser with the masked-diffusion
//! objective, decodes it under left-to-right and adaptive orders, measures
//! Pass@k, coverage and finalization entropy, and post-trains it with GRPO
//! over the exact autoregressive policy induced by future-masked states.

pub mod analysis;
pub mod cli;
pub mod decoding;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grpo;
pub mod io;
pub mod optim;
pub mod policy;
pub mod prob;
pub mod rng;
pub mod sequence;
pub mod tasks;
pub mod vocab;

pub use error::{Error, Result};
