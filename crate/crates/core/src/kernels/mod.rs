//! Numeric core shared by the vocoder and the denoiser: dense and structured
//! sparse matrix-vector products, 1-D convolutions, the GRU cell and
//! block-magnitude pruning. Everything is f32, row-major.

pub(crate) mod conv;
mod gru;
pub(crate) mod matrix;

pub use conv::{
    conv1d, depthwise_conv1d, pointwise, transpose_conv1d, ConvKernel, DepthwiseKernel, Sequence,
};
pub use gru::{gru_step, GruScratch, GruWeights};
pub use matrix::{
    magnitude_prune, BlockDiagonalMatrix, BlockSparseMatrix, LinearOp, Matrix, BLOCK,
};

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn prelu(x: f32, alpha: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}
