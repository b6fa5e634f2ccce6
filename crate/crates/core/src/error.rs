use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("step size underflow at t = {t}, h = {h:.3e} (stiff field?)")]
    Stiffness { t: f64, h: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("certificate rejected: {0}")]
    Certificate(String),

    #[error("error bound violated: {0}")]
    BoundViolation(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
