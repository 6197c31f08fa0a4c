//! Deterministic dense tensors, layer kernels and reverse-mode autodiff.

mod batchnorm;
mod graph;
pub mod ops;
mod tensor;

pub use batchnorm::{batchnorm_forward, BatchNormState, BN_EPS};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{add, argmax_rows, conv2d, cross_entropy, global_avg_pool, linear, relu, resize_bilinear};
pub use tensor::{Real, Tensor, ToBits};

/// Standalone conv forward (no graph).
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> crate::Result<Tensor<T>> {
    conv2d(input, weight, stride, padding, 1)
}
