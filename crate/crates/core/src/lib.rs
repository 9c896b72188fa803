//! Open-vocabulary semantic segmentation for aerial and satellite imagery.

pub mod autograd;
pub mod backbones;
pub mod backprojection;
pub mod checkpoint;
pub mod correlation;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod params;
pub mod pipeline;
pub mod refinement;
pub mod resize;
pub mod runner;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Binder, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision aliases used by training and the command line.
pub type Tensor32 = Tensor<f32>;
pub type ParamStore32 = ParamStore<f32>;
/// Double-precision aliases used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;
pub type ParamStore64 = ParamStore<f64>;
