//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants distinguish
//! caller contract violations (shape/width mismatches, out-of-range ids) from
//! bad external inputs (parse errors with line numbers) and from runtime
//! failures (non-finite training state, checkpoint corruption), because the
//! CLI maps them to different machine-readable error kinds.

use std::path::PathBuf;

/// Alias used across the crate.
pub type Result<T> = std::result::Result<T, UdcError>;

#[derive(Debug, thiserror::Error)]
pub enum UdcError {
    /// Tensor/matrix dimensions do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// An input file failed to parse. `line` is 1-based; 0 means whole-file.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A checkpoint file is malformed, truncated, or fails its checksum.
    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    /// A required stage artifact is missing from the run directory.
    #[error("missing checkpoint: {stage} requires {path}")]
    MissingStage { stage: &'static str, path: PathBuf },

    /// Training state became NaN/Inf; carries a diagnostic of where.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl UdcError {
    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UdcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category for CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            UdcError::Dimension { .. } => "dimension",
            UdcError::Contract(_) => "contract",
            UdcError::Config(_) => "config",
            UdcError::Parse { .. } => "parse",
            UdcError::Checkpoint { .. } => "checkpoint",
            UdcError::MissingStage { .. } => "missing_stage",
            UdcError::NonFinite(_) => "non_finite",
            UdcError::Io { .. } => "io",
        }
    }
}
