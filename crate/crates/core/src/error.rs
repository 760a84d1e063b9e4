use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the CLI exit codes: config errors exit 2, data
/// errors (IO, parse, dimension, label, contract, degeneracy) exit 3, and
/// capacity errors exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity error{}: {detail}", round.map(|r| format!(" (round {r})")).unwrap_or_default())]
    Capacity { round: Option<usize>, detail: String },

    #[error("degenerate input: {0}")]
    Degeneracy(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn capacity(detail: impl Into<String>) -> Self {
        Error::Capacity {
            round: None,
            detail: detail.into(),
        }
    }

    /// Attach a refinement-round index to a capacity error, leaving other
    /// errors untouched.
    pub fn with_round(self, round: usize) -> Self {
        match self {
            Error::Capacity { detail, .. } => Error::Capacity {
                round: Some(round),
                detail,
            },
            other => other,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 capacity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Capacity { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
