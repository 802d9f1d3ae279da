use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("dataset layout error: missing {}", .0.display())]
    Layout(PathBuf),

    #[error("ingestion error: {}: {detail}", path.display())]
    Ingest { path: PathBuf, detail: String },

    #[error("non-finite output in coupling block {block}: {detail}")]
    NumericalOverflow { block: usize, detail: String },

    #[error("training aborted (run {run}, epoch {epoch}, batch {batch}): {detail}")]
    TrainingAborted {
        run: usize,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint schema error: {0}")]
    Schema(String),

    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("pretrained weights digest mismatch: checkpoint records {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("gradient capture unavailable: {0}")]
    GradientUnavailable(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration/usage, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidInput(_)
            | Error::Init(_)
            | Error::Layout(_)
            | Error::Metric(_)
            | Error::Schema(_)
            | Error::Version { .. }
            | Error::DigestMismatch { .. }
            | Error::GradientUnavailable(_) => 2,
            Error::NumericalOverflow { .. } | Error::TrainingAborted { .. } => 3,
            Error::Ingest { .. } | Error::Corrupt(_) | Error::Io { .. } | Error::Image(_) => 4,
        }
    }
}
