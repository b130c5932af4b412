use std::path::PathBuf;

use diffarray::ArrayError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Config(String),
    #[error("corrupt or unrecognized file: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("style reference is empty")]
    EmptyReference,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing-file",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Diverged { .. } => "diverged",
            Error::Array(ArrayError::NonFiniteGrad { .. }) => "diverged",
            Error::Array(_) => "numeric",
            Error::Construction(_) | Error::Generation(_) => "generation",
            Error::EmptyReference | Error::Invalid(_) => "invalid-input",
        }
    }

    /// Process exit status for command-line use; each category maps to a distinct code.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "missing-file" => 3,
            "config" => 4,
            "version" => 5,
            "format" => 6,
            "diverged" => 7,
            "numeric" => 8,
            "generation" => 9,
            "invalid-input" => 10,
            _ => 1,
        }
    }
}
