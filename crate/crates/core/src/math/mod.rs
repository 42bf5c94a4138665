//! Tensors, a reverse-mode tape, Adam, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params};
pub use params::{Gradients, ParamId, ParamSet};
pub use tape::{counter_uniform, Mode, Tape, Var};
pub use tensor::{matmul_raw, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MathError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("tape is empty")]
    EmptyTape,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: empty reduction")]
    EmptyReduction { op: &'static str },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
