use thiserror::Error;

/// Errors produced by the flow, controller, simulation and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in coupling layer {layer}: {what}")]
    NonFiniteLayer { layer: usize, what: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular mass matrix at configuration {config:?}")]
    SingularMass { config: Vec<f64> },

    #[error("state diverged at t = {time:.4} s (|x| = {norm:.3e})")]
    Divergence { time: f64, norm: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss in minibatch {minibatch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, minibatch: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
