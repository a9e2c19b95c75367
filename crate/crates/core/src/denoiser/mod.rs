//! The bidirectional transformer denoiser `p(x0 | xt)`.

mod checkpoint;
mod model;
mod params;
pub mod scalar;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{backward, forward, logits, ForwardCache, LogitsGrid};
pub use params::{DenoiserConfig, DenoiserParams, Layout, Params, TensorSpec};
pub use scalar::Scalar;
