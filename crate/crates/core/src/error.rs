use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("function is not deterministic: two evaluations on the same input differ")]
    NonDeterministic,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("could not sample {wanted} robust grasps on {shape} after {tries} tries")]
    Sampling {
        shape: String,
        wanted: usize,
        tries: usize,
    },

    #[error("shape does not fit in the image frame: {0}")]
    OutOfFrame(String),

    #[error("non-finite {tensor} in phase {phase}, step {step}")]
    NonFinite {
        phase: usize,
        step: usize,
        tensor: String,
    },

    #[error("quality model is frozen; its parameters cannot be modified")]
    Frozen,

    #[error("evaluation split overlaps the detector's training split ({0} shared scenes)")]
    SplitOverlap(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
