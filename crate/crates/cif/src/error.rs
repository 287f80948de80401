//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: input or
//! validation problems (bad files, bad shapes, bad arguments) exit with 2,
//! numeric failures (non-finite gradients, degenerate distributions or
//! rotations) exit with 3.

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure (file missing, unreadable, ...).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A buffer or parameter vector has the wrong length/shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An API was called in the wrong order (e.g. backward without the
    /// forward cache).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric invariant failed (non-finite gradient, invalid loss, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Identity normalizer was zero or non-finite for a Gaussian.
    #[error("degenerate identity distribution for gaussian {index}: normalizer {normalizer:e}")]
    DegenerateDistribution { index: usize, normalizer: f64 },

    /// Deformed quaternion collapsed below the representable norm.
    #[error("degenerate rotation for gaussian {index}: |q + dq| = {norm:e} < 1e-8")]
    DegenerateRotation { index: usize, norm: f64 },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad checkpoint magic (expected \"CIF1\")")]
    BadMagic,

    /// Checkpoint version is newer than this build understands.
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    /// Checkpoint ended before all declared payload was read.
    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),

    /// A PPM/PGM file is malformed or uses an unsupported variant.
    #[error("image format error: {0}")]
    ImageFormat(String),

    /// The scene manifest is malformed or inconsistent.
    #[error("scene format error: {0}")]
    SceneFormat(String),

    /// A mask pixel carries a label above the declared instance count.
    #[error("mask label {label} exceeds declared instance count {declared}")]
    LabelOverflow { label: u32, declared: u32 },
}

impl Error {
    /// Process exit code for the CLI: 2 for input/validation problems,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_)
            | Error::DegenerateDistribution { .. }
            | Error::DegenerateRotation { .. } => 3,
            _ => 2,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
