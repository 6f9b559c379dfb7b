//! Neural-network substrate: tensors, a reverse-mode tape, parameter sets,
//! the windowed-attention encoder, and a finite-difference gradient checker.

pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use encoder::{dense_block_reference, patchify, unpatchify, Encoder, EncoderConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId, ParamBinding};
pub use params::ParamSet;
pub use tensor::{Scalar, Tensor};

use std::fmt;

/// Errors from tensor/graph/model construction and execution.
#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    /// Shape or index mismatch between operands.
    Shape(String),
    /// Invalid configuration (divisibility, zero sizes, bad ranges).
    Config(String),
    /// NaN or infinity where a finite value is required.
    NonFinite(String),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Shape(m) => write!(f, "shape error: {m}"),
            NnError::Config(m) => write!(f, "config error: {m}"),
            NnError::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl std::error::Error for NnError {}
