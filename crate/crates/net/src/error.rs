use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("input {height}x{width} is smaller than the minimum {min_height}x{min_width}")]
    TooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },
    #[error("expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed parameter archive: {message}")]
    Archive { path: PathBuf, message: String },
    #[error("parameter {name}: {message}")]
    Parameter { name: String, message: String },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;
