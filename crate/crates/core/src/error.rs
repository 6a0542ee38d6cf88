//! Crate-wide error type.
//!
//! Variants are grouped by where they surface: graph construction and
//! execution, attack preconditions, training aborts, and file formats.
//! The CLI maps `is_config_error` / `is_numerical_error` onto exit codes.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// A constructor or operation received tensors of incompatible shapes.
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// Data buffer length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// A class label lies outside `[0, num_classes)`.
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
    /// A forward or backward pass produced a NaN or infinity.
    NonFinite { context: String },
    /// A parameter violated its documented precondition.
    InvalidArgument { context: &'static str, detail: String },
    /// An attack asked for more access than its threat model grants.
    ThreatViolation { attack: &'static str, required: &'static str, granted: &'static str },
    /// A block specification does not partition the pixel set.
    BadBlockSpec { detail: String },
    /// Training diverged; carries the step at which the loss went non-finite.
    TrainingDiverged { epoch: usize, step: usize },
    /// A dataset or checkpoint file failed to parse.
    Format { path: String, detail: String },
    /// A payload ended early; byte counts name the gap.
    Truncated { path: String, expected: usize, actual: usize },
    /// Checkpoint parameters do not fit the architecture being loaded into.
    ArchitectureMismatch { detail: String },
    Io(io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(context: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { context, detail: detail.into() }
    }

    /// True for errors caused by bad configuration or bad input files.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument { .. }
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::ArchitectureMismatch { .. }
                | Error::ShapeMismatch { .. }
                | Error::DataLength { .. }
                | Error::LabelOutOfRange { .. }
                | Error::BadBlockSpec { .. }
                | Error::ThreatViolation { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    /// True for numerical failures (NaN/Inf surfaced at runtime).
    pub fn is_numerical_error(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::TrainingDiverged { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, expected, got } => {
                write!(f, "{context}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::LabelOutOfRange { index, label, num_classes } => {
                write!(f, "label {label} at index {index} out of range [0, {num_classes})")
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InvalidArgument { context, detail } => write!(f, "{context}: {detail}"),
            Error::ThreatViolation { attack, required, granted } => {
                write!(f, "{attack} requires {required} access but only {granted} was granted")
            }
            Error::BadBlockSpec { detail } => write!(f, "block spec is not a partition: {detail}"),
            Error::TrainingDiverged { epoch, step } => {
                write!(f, "training loss became non-finite at epoch {epoch}, step {step}")
            }
            Error::Format { path, detail } => write!(f, "{path}: {detail}"),
            Error::Truncated { path, expected, actual } => {
                write!(f, "{path}: truncated, expected {expected} bytes, got {actual}")
            }
            Error::ArchitectureMismatch { detail } => {
                write!(f, "checkpoint does not match architecture: {detail}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
