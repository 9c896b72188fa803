//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).

mod graph;
mod ops;

pub use graph::{BackwardCtx, Gradients, Graph, Var};
pub(crate) use ops::flip_tensor;
