//! Differentiable operations. Elementwise, reduction, activation and
//! matrix ops are methods on [`Tensor`](crate::Tensor); the rest are free
//! functions.

mod activation;
mod arith;
mod conv;
mod matmul;
mod norm;
mod shape;

pub use conv::{conv2d, conv_transpose2d, upsample_nearest};
pub use norm::group_norm;
pub use shape::{attention, concat, embedding};
