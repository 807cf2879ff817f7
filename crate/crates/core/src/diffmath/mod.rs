//! Dense tensors, FFT convolution, small linear algebra, and a reverse-mode
//! differentiation graph.

mod fft;
mod graph;
mod linalg;
mod tensor;

pub use fft::fft_convolve_causal;
pub use graph::{Graph, Var};
pub use linalg::{symmetric_eigendecomposition, symmetric_solve, EigenPairs};
pub use tensor::Tensor;
