//! Reverse-mode automatic differentiation for the handful of operations a
//! small convolutional detector/segmenter needs: convolution, group norm,
//! bilinear resampling, pooling, and scalar nodes with externally computed
//! local gradients (fused losses).

mod graph;
mod kernels;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
