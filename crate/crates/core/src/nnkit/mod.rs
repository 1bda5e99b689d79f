//! Minimal dense/recurrent network core with hand-written reverse-mode
//! gradients, 64-bit floats throughout.
//!
//! [`Network`] chains dense, batch-norm and leaky-ReLU layers and records the
//! caches that [`Network::backward`] consumes. Recurrent cells are stepped
//! explicitly through [`RecurrentCell`] so callers control unrolling.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
pub(crate) mod linalg;
mod network;
mod recurrent;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, HexTensor, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_cell, grad_check_network, GradCheckReport};
pub use layers::{l1_subgradient, LayerKind, LayerSpec};
pub use network::{Mode, Network};
pub use recurrent::{CellKind, CellState, RecurrentCell, StepCache};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch at {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Anything owning trainable tensors in a fixed, declared order.
pub trait Parameterized {
    /// Parameter names and tensors, in declared order.
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}
