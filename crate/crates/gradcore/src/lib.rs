//! Numeric substrate for the planner: dense `f64` tensors, a reverse-mode
//! autodiff tape, a handful of network layers, Adam with a one-cycle learning
//! rate schedule, and a little-endian named-tensor checkpoint format.
//!
//! The tape ([`Graph`]) records every primitive as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node sweeps the record in reverse and
//! returns one gradient per node; [`Gradients::accumulate_into`] adds the
//! parameter gradients to a [`ParamStore`], which owns the Adam state.

pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use schedule::onecycle_lr;
pub use tensor::{matmul, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a single scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GradError>;
