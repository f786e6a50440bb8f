//! Minimal reverse-mode autodiff over dense row-major tensors, plus the
//! optimizer, RNG and checkpoint format used by the codec.

mod elem;
mod error;
mod tensor;

pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod rng;

pub use adamw::{AdamW, AdamWConfig};
pub use elem::Elem;
pub use error::{Result, TensorError};
pub use ops::{attention, concat, conv2d, conv_transpose2d, embedding, group_norm, upsample_nearest};
pub use params::{Param, ParamId, ParamStore, Session};
pub use rng::Rng;
pub use tensor::Tensor;
