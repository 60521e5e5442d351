use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("map of {height}x{width} is not divisible into {block}x{block} blocks")]
    NotDivisible { height: usize, width: usize, block: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("value {value} at index {index} is not representable as {dtype}")]
    Unrepresentable { index: usize, value: f32, dtype: &'static str },

    #[error("bad format: {0}")]
    Format(String),

    #[error("unsupported version {0}")]
    Version(u8),

    #[error("truncated stream: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} trailing bytes after encoded map")]
    TrailingBytes(usize),

    #[error("layer list is empty")]
    EmptyLayers,
}
