//! Differentiable tensor kernels used by the network blocks.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod reduce;
pub mod resample;

use thiserror::Error;

/// Shape and value validation failures raised by tensor operations and
/// network blocks.
#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("{context}: expected {expected} channels, got {got}")]
    ChannelMismatch { context: String, expected: usize, got: usize },
    #[error("{context}: shapes {a:?} and {b:?} do not match")]
    Mismatch { context: String, a: Vec<usize>, b: Vec<usize> },
    #[error("{context}: spatial size {h}x{w} must be even")]
    OddSpatial { context: String, h: usize, w: usize },
    #[error("{context}: spatial size {h}x{w} not divisible by {divisor}")]
    NotDivisible { context: String, h: usize, w: usize, divisor: usize },
    #[error("aim expects 2 or 3 neighbor features, got {got}")]
    NeighborCount { got: usize },
    #[error("aim neighbors must step down by exactly 2x: {a:?} -> {b:?}")]
    NeighborScale { a: (usize, usize), b: (usize, usize) },
    #[error("aim with {neighbors} neighbors is invalid at level {level}")]
    NeighborLevel { neighbors: usize, level: usize },
    #[error("{context}: ground truth contains non-binary value {value}")]
    NotBinary { context: String, value: f64 },
    #[error("rsu depth must be >= 2, got {got}")]
    RsuDepth { got: usize },
    #[error("block level must be in 1..=5, got {got}")]
    Level { got: usize },
}
