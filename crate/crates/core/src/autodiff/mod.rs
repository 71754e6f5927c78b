//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter through
//! [`Graph::param`] and receive gradients keyed by the caller's slot index;
//! everything else is a constant or an intermediate.

mod graph;
mod tensor;

pub(crate) use graph::{log_softmax_in_place, softmax_in_place};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Variance floor used by every layer norm in the policy.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Softmax of a plain slice, with max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Log-softmax of a plain slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    log_softmax_in_place(&mut out);
    out
}
