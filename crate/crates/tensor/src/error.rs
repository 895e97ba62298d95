use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{context}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{context}: non-finite value in input")]
    NonFinite { context: &'static str },
    #[error("{layer}: backward called without a cached forward pass")]
    MissingCache { layer: &'static str },
    #[error("non-finite gradient in layer {layer_index}, step rejected")]
    NonFiniteGradient { layer_index: usize },
    #[error("invalid layer configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
