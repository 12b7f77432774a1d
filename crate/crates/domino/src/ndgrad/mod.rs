//! Minimal dense-array computation core with reverse-mode differentiation.
//!
//! A [`Tape`] records forward operations into an append-only arena; the
//! append order is topological, so a single reverse sweep computes
//! gradients for every leaf that requires them. Arrays are plain owned
//! values; a tape is confined to the thread that built it, and independent
//! tapes may run concurrently.

pub mod array;
pub mod gradcheck;
pub mod ndck;
pub mod ops;
pub mod tape;

pub use array::{Array, Dtype, Scalar};
pub use gradcheck::{grad_check, grad_check_multi, op_checks, GradCheckOpts, GradCheckReport, NamedCheck};
pub use ndck::{read_ndck, write_ndck, StoredArray};
pub use ops::{BatchNormMode, OpKind};
pub use tape::{Gradients, Tape, ValueRef};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape error: {what}")]
    BadShape { what: String },
    #[error("op {op}: incompatible input shapes {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("op {op}: expected {expected} inputs, got {got}")]
    BadArity { op: &'static str, expected: usize, got: usize },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("backward root must be a scalar, got shape {shape:?}")]
    RootNotScalar { shape: Vec<usize> },
    #[error("value reference {0} is not on this tape")]
    BadRef(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container format error: {0}")]
    Format(String),
}
