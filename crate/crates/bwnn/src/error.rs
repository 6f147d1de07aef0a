use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input not unit-norm (norm = {0})")]
    Unnormalized(f64),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("quadrature did not converge: max change {0:e}")]
    Quadrature(f64),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
