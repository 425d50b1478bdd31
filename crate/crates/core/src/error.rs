use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for codebook of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("manifest errors: {}", .0.join("; "))]
    Manifest(Vec<String>),

    #[error("config: {0}")]
    Config(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit status for the command-line tool: 2 bad config,
    /// 3 missing checkpoint, 4 dataset problems, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingCheckpoint(_) => 3,
            Error::DatasetMismatch(_) | Error::Manifest(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
