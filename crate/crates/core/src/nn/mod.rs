//! Minimal tensor and autograd machinery for the autoencoder.

mod graph;
pub mod ops;
mod tensor;

pub use graph::{CustomOp, Graph, ParamGroup, ParamStore, Var};
pub use ops::{ConvGeometry, Padding};
pub use tensor::Tensor;
