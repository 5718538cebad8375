//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, the network, attacks, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor (or label map) had the wrong shape for an operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A parameter or configuration value violates a precondition.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A computation produced NaN or Inf where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f32 },

    /// Attack optimization aborted because a gradient became non-finite.
    #[error("non-finite gradient at attack iteration {iteration}")]
    AttackDiverged { iteration: usize },

    /// A label-map class index is out of range.
    #[error("class index {class} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { class: u8, num_classes: usize },

    /// Dynamic target generation found no background pixel to fill from.
    #[error("no background to fill from: every pixel is predicted as the hidden class")]
    EmptyBackground,

    /// A file could not be parsed; names the offending field.
    #[error("parse error in {path} ({field}): {message}")]
    Parse {
        path: String,
        field: String,
        message: String,
    },

    /// A model/perturbation pair failed its checksum pairing check.
    #[error("artifact mismatch: {0} (pass --force to override)")]
    ArtifactMismatch(String),

    /// A required artifact is missing on disk.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
