use thiserror::Error;

use crate::element::ElementFormat;

/// Errors raised by the in-memory conversion, GEMM and flow routines.
///
/// File-level failures live in [`crate::io::FileError`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MxError {
    #[error("{value} has no encoding in {fmt}")]
    UnrepresentableSpecial { fmt: ElementFormat, value: f64 },

    #[error("input contains NaN or infinity")]
    SpecialInput,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("block size mismatch: {left} vs {right}")]
    BlockSizeMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis mismatch: {0}")]
    AxisMismatch(String),

    #[error("unsupported rank {rank} (expected {expected})")]
    RankError { rank: usize, expected: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = MxError> = std::result::Result<T, E>;
