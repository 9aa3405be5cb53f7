//! Small reverse-mode autodiff engine over dense tensors.
//!
//! Built for single-core CPU training of the miniature autoencoder, fusion
//! and denoising networks: convolutions lower to im2col + gemm
//! (`matrixmultiply`), everything else is a direct loop. Generic over
//! [`Scalar`] so gradient checks can run in `f64`.

mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use params::{Adam, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
