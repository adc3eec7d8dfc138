//! Checkpoints: a CBOR parameter archive plus a JSON sidecar describing it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spine_core::metrics::MetricsReport;
use spine_net::{load_params, save_params, ModelSpec, SpineNet};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::{read_json, write_json};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub overall_pck: f64,
    pub overall_macro_f1: f64,
    pub disc_macro_f1: f64,
    pub vertebra_macro_f1: f64,
    pub micro_ap: f64,
}

impl From<&MetricsReport> for MetricSnapshot {
    fn from(r: &MetricsReport) -> Self {
        MetricSnapshot {
            overall_pck: r.overall_pck,
            overall_macro_f1: r.overall_macro_f1,
            disc_macro_f1: r.disc.classification.macro_f1,
            vertebra_macro_f1: r.vertebra.classification.macro_f1,
            micro_ap: r.micro_ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: String,
    /// Last completed epoch (0-based).
    pub epoch: usize,
    pub config_hash: String,
    /// Validation metrics after `epoch`.
    pub metrics: Option<MetricSnapshot>,
    pub model: ModelSpec,
}

/// Sidecar path of a parameter archive: same stem, `.json` extension.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

pub fn save_checkpoint(net: &mut SpineNet, meta: &CheckpointMeta, archive: &Path) -> Result<()> {
    save_params(net, archive)?;
    write_json(&sidecar_path(archive), meta)
}

pub fn read_meta(archive: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = read_json(&sidecar_path(archive))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(PipelineError::FormatVersion(meta.format_version));
    }
    Ok(meta)
}

/// Rebuilds the network stored at `archive`. With `config`, the checkpoint
/// must have been written by a run with that exact configuration.
pub fn load_checkpoint(archive: &Path, config: Option<&RunConfig>) -> Result<(SpineNet, CheckpointMeta)> {
    let meta = read_meta(archive)?;
    if let Some(config) = config {
        let expected = config.hash();
        if meta.config_hash != expected {
            return Err(PipelineError::ConfigMismatch {
                expected,
                found: meta.config_hash,
            });
        }
    }
    let mut net = SpineNet::new(meta.model.clone());
    load_params(&mut net, archive)?;
    Ok((net, meta))
}
