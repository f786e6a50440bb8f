//! Perceptual image codec with a conditional diffusion decoder.
//!
//! An image is sent as a vector-quantised grid of hyper-latents plus a
//! DEFLATE-compressed caption. The decoder samples a reconstruction with
//! DDIM under classifier-free guidance, conditioned on both.

pub mod bitstream;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod quantize;

pub use error::{CodecError, Result};
