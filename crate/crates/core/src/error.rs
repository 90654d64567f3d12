use std::path::PathBuf;

use crate::manifest::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("manifest validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("curation error: {0}")]
    Curation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("endpoint returned {status}: {message}")]
    Endpoint { status: u16, message: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("format error: {0}")]
    Format(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation/config problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Argument(_)
            | Error::Config(_)
            | Error::Format(_) => 1,
            _ => 2,
        }
    }
}
