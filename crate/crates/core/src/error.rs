use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed graph: {primitive} cannot take shapes {shapes:?}")]
    MalformedGraph {
        primitive: &'static str,
        shapes: Vec<(usize, usize)>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("topological order violated: {0}")]
    TopologicalOrder(String),

    #[error("topology mismatch: expected fingerprint {expected}, found {found}")]
    TopologyMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("pretraining failed: held-out accuracy {achieved:.4} below target {target:.4}")]
    PretrainingFailed { achieved: f64, target: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedGraph { .. } => "malformed-graph",
            Error::Contract(_) => "contract-violation",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::TopologicalOrder(_) => "topological-order",
            Error::TopologyMismatch { .. } => "topology-mismatch",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::PretrainingFailed { .. } => "pretraining-failed",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
