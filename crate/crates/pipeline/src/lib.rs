//! End-to-end pipeline around the spine keypoint detector: phantom data
//! generation, training with checkpoints and JSON-lines logs, evaluation
//! reports, single-exam inference and figures.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod plot;
pub mod train;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use config::{Profile, RunConfig};
pub use error::{PipelineError, Result};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_owned(),
        source,
    })
}
