//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by quantization, execution and cache operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An input value violated a precondition (non-finite, empty grid, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operand shapes are inconsistent (group size not dividing, dim mismatch).
    #[error("shape error: {0}")]
    Shape(String),

    /// The requested configuration is not implemented.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A level-1 reconstruction escaped the signed 8-bit range. This signals
    /// a quantizer bug: the protective range is supposed to make it impossible.
    #[error("int8 overflow violation: value {value} at ({row}, {col})")]
    OverflowViolation { value: i64, row: usize, col: usize },

    /// A lane product exceeded the 8-bit lane in checked mode.
    #[error("lane overflow: lane {lane} product {product} exceeds 255")]
    LaneOverflow { lane: usize, product: u32 },

    /// Reduction dimension too large for exact 32-bit accumulation.
    #[error("accumulator overflow risk: k = {0} exceeds 65536")]
    AccumulatorOverflow(usize),

    /// Decode attention was asked to run against a cache with no tokens.
    #[error("empty kv cache")]
    EmptyCache,

    /// Unknown precision key or inconsistent hardware/precision config.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Container file is malformed.
    #[error("container format: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
