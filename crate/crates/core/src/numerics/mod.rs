//! Dense tensors, the differentiable op catalog, a recording tape and the
//! finite-difference gradient checker.

mod adam;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, CorruptedVjp, Differentiable, GradCase, GradCheckReport, TapeFn};
pub use ops::{Grid3, KvPrefix, LinearPrefix, Op, RopeTable};
pub use params::{ParamId, ParamStore, CHECKPOINT_MANIFEST};
pub use rng::Rng;
pub use tape::{Gradients, OpNode, Tape, Var};
pub use tensor::{DType, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: non-finite value {value} at flat index {index}")]
    NonFinite { op: String, index: usize, value: f64 },
    #[error("linear_attention: degenerate denominator {value:e} < floor {floor:e} at row {row}, head {head}")]
    DegenerateDenominator { row: usize, head: usize, value: f64, floor: f64 },
    #[error("no vjp registered for `{0}`")]
    MissingVjp(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed tensor data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::ShapeMismatch { op, detail: detail.into() }
    }
}
