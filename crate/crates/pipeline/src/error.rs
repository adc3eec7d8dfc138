use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] spine_core::Error),
    #[error(transparent)]
    Net(#[from] spine_net::NetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no exams found under {0}")]
    EmptyDataset(PathBuf),
    #[error("checkpoint was written by config {found}, but the run config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("unsupported checkpoint format version {0}")]
    FormatVersion(u32),
    #[error("{0} contains no PCK curve to plot")]
    EmptyReport(PathBuf),
    #[error("plotting failed: {0}")]
    Plot(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
