use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum BlissError {
    /// Non-conformant tensors or parameter vectors.
    #[error("shape error: {0}")]
    Shape(String),
    /// Bad input data (token out of range, length mismatch, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite value encountered while evaluating or differentiating a graph.
    #[error("differentiation error: {0}")]
    Differentiation(String),
    /// A training step produced a non-finite gradient or loss.
    #[error("optimization error at step {step}: {detail}")]
    Optimization { step: usize, detail: String },
    /// GDLS failure (non-finite Hessian-vector product, ...).
    #[error("solver error: {0}")]
    Solver(String),
    /// API misuse (empty batch, invalid fraction, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Configuration file or override rejected.
    #[error("config error: {0}")]
    Config(String),
    /// A pipeline stage aborted.
    #[error("stage '{stage}' failed: {detail}")]
    Stage { stage: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed checkpoint or dataset file.
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, BlissError>;
