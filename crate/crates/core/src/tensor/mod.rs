//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass; each
//! recorded value is addressed by a copyable [`Var`]. Calling
//! [`Graph::backward`] on a scalar sweeps the record in reverse and returns the
//! gradient of every node that depends on a parameter. Graphs are meant to be
//! short-lived: build one per training step and drop it after the update.

mod adamw;
mod array;
mod gradcheck;
mod graph;
mod ops;
#[cfg(test)]
mod tests;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use array::{Element, Tensor};
pub use gradcheck::{grad_check, primitive_suite, GradCheckReport, SuiteEntry};
pub use graph::{Attrs, Gradients, Graph, Op, Var, CATALOG};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{op}: invalid attribute: {reason}")]
    BadAttribute { op: &'static str, reason: String },
    #[error("{op}: expected {expected} input(s), got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("data length {len} does not fill shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("variable does not belong to this graph")]
    ForeignVar,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
