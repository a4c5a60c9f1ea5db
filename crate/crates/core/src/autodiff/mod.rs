//! Reverse-mode automatic differentiation over small dense tensors.

pub mod gradcheck;
mod tape;
mod tensor;

pub(crate) use tape::pairwise_distances;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
