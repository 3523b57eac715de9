//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records each operation as it executes (a tape). Parameters
//! live in [`ParamGroup`]s and are copied onto the tape with
//! [`Graph::bind`]; after [`Graph::backward`] the group pulls the leaf
//! gradients back with [`ParamGroup::accumulate_from`].

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, MIN_PROBES};
pub use graph::{Bound, Fault, Graph, Var};
pub use optim::{adam_step, AdamConfig, ParamGroup};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}
