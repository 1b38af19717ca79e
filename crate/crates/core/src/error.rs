use thiserror::Error;

/// Errors produced by the engine, grouped so callers can map them onto
/// process exit codes (config/usage vs. data/format vs. numeric).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (sampler, model spec, OSM grid, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A serialized artifact (VVOL, checkpoint, manifest) is malformed.
    /// `field` names the offending header field or section.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Autodiff contract violation: backward() on a non-scalar tensor.
    #[error("gradient error: {0}")]
    NonScalarLoss(String),

    /// The loss tensor is not connected to any recorded operation.
    #[error("gradient error: {0}")]
    DetachedGraph(String),

    /// Numeric failure: non-finite loss or gradient, oracle failure, a
    /// diverged iteration.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Statistics preconditions violated (sample too small, singleton class).
    #[error("stats error: {0}")]
    Stats(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn stats(msg: impl Into<String>) -> Self {
        Error::Stats(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
