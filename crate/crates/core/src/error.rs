use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown system `{name}`; valid systems: {}", valid.join(", "))]
    UnknownSystem {
        name: String,
        valid: Vec<&'static str>,
    },

    #[error("degenerate state: minimum density {min_rho:e} is below {threshold:e}")]
    DegenerateState { min_rho: f64, threshold: f64 },

    #[error("step size underflow at t = {t}: h = {h:e} (span {span}); problem may be stiff")]
    Stiffness { t: f64, h: f64, span: f64 },

    #[error("solution diverged at t = {t} (step {step}): non-finite derivative")]
    Divergence { t: f64, step: usize },

    #[error("solution blew up at t = {t}: max |u| = {max_abs} exceeds {limit}")]
    Blowup { t: f64, max_abs: f64, limit: f64 },

    #[error("generation failed for initial-condition seed {seed}: {source}")]
    Generation {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    TrainingDiverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed tensor file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("manifest references missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported format version {found} (expected {expected}); regenerate the file with this version of molpde")]
    Version { found: u32, expected: u32 },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics (NaN, stiffness, degenerate
    /// states) rather than by bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateState { .. }
            | Error::Stiffness { .. }
            | Error::Divergence { .. }
            | Error::Blowup { .. }
            | Error::TrainingDiverged { .. } => true,
            Error::Generation { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
