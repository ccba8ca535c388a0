use thiserror::Error;

pub type Result<T> = std::result::Result<T, HatError>;

#[derive(Debug, Error)]
pub enum HatError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// One entry per violated constraint, each already prefixed with its source line.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    ConfigViolations(Vec<String>),

    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("{path}: format error at byte offset {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("non-finite training loss at optimisation step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint config digest {found} does not match {expected} (use --force to override)")]
    DigestMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HatError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        HatError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HatError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
