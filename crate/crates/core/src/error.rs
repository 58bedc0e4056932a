//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough context
//! (offending layer, block index, epoch) that a CLI user can act on the
//! message without a stack trace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got a tensor with {elements} elements")]
    NonScalarLoss { elements: usize },

    #[error("quantizer scale must be strictly positive, got {alpha}")]
    NonPositiveAlpha { alpha: f64 },

    #[error("value {value} in `{name}` is off the {bits}-bit grid by {distance:e} (> 1e-9 * alpha); re-export from a frozen checkpoint")]
    OffGrid { name: String, value: f64, bits: u32, distance: f64 },

    #[error("network spec invalid at block {index}: {detail}")]
    BadBlockSpec { index: usize, detail: String },

    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("checkpoint `{path}`: {detail}")]
    BadCheckpoint { path: String, detail: String },

    #[error("architecture fingerprint mismatch: checkpoint was written for {found:#018x}, current network is {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("config: {0}")]
    BadConfig(String),

    #[error("dataset: {0}")]
    BadData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience constructor for shape complaints.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// Convenience constructor for argument complaints.
    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
