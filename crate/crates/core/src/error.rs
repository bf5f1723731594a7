use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A serialized artifact (checkpoint, image, dataset) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// An integer label lies outside `[0, classes)`.
    #[error("label error: {0}")]
    Label(String),

    /// A mask tensor is not binary where the contract requires it.
    #[error("mask error: {0}")]
    Mask(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A variable does not belong to the tape being differentiated.
    #[error("graph error: {0}")]
    Graph(String),

    /// An autodiff contract was violated (e.g. non-scalar backward root).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Scene generation could not satisfy its coverage invariants.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
