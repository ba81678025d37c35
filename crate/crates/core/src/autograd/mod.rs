//! Minimal reverse-mode automatic differentiation over dense `f32` matrices.
//!
//! Kernels that dominate the point-cloud workload (layer/batch normalization,
//! multi-head attention, segment pooling) are fused single nodes with
//! hand-written backward passes. GEMM is delegated to `matrixmultiply`.

mod attention;
mod graph;
mod ops;
mod tensor;

pub use attention::{AttnSpec, AttnTask};
pub use graph::{Gradients, Graph, Var};
pub use ops::{sigmoid, BatchStats};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
