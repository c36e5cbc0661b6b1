//! Minimal reverse-mode differentiation over dense float64 tensors.
//!
//! Only the operations the representation network and the distance-covariance
//! penalties need are provided. Gradients through non-smooth points use fixed
//! subgradients: ReLU has derivative 0 at 0, and the derivative of a pairwise
//! distance that is exactly 0 is taken to be 0.

pub mod check;
mod graph;
pub mod tensor;

pub use graph::{BatchMoments, Binary, BnState, Graph, Mode, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
