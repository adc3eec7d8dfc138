//! Run configuration: named profiles, JSON files layered over a profile, and
//! `SPINEONE_` environment overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use spine_core::ingest::AugmentationSpec;
use spine_core::metrics::default_curve_thresholds;
use spine_core::objectives::{LossConfig, OASpec};
use spine_net::{AdamConfig, AttentionSpec, BackboneSpec, ModelSpec};

use crate::error::{PipelineError, Result};

pub const ENV_PREFIX: &str = "SPINEONE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-resolution recipe: 640 canvas, 512 crops, 300 epochs.
    Paper,
    /// Laptop-sized recipe: 160 canvas, 128 crops, 60 epochs, tiny backbone.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub head_width: usize,
    pub attention_reduction: usize,
    pub heatmap_prior: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub zoom_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_mm: f64,
    /// Detections kept per branch.
    pub top_k: usize,
    /// Minimum distance between two detections of one branch.
    pub suppression_px: f64,
    pub curve_thresholds_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub train_dir: PathBuf,
    pub test_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub n_slices: usize,
    pub canvas: usize,
    pub crop: usize,
    /// Target spacing in mm per pixel.
    pub spacing: f64,
    pub radius_px: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_power: f64,
    pub adam: AdamConfig,
    pub oa_enabled: bool,
    pub oa: OASpec,
    pub attention_enabled: bool,
    pub seed: u64,
    /// Share of the training exams held out for checkpoint selection.
    pub validation_fraction: f64,
    pub augmentation: AugmentConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

/// Batch size and initial learning rate with and without attention.
pub fn default_batch_and_lr(attention_enabled: bool) -> (usize, f64) {
    if attention_enabled {
        (16, 0.01)
    } else {
        (64, 0.04)
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        let (batch_size, initial_lr) = default_batch_and_lr(true);
        RunConfig {
            profile: Profile::Paper,
            train_dir: PathBuf::from("data/train"),
            test_dir: Some(PathBuf::from("data/test")),
            out_dir: PathBuf::from("runs/paper"),
            n_slices: 7,
            canvas: 640,
            crop: 512,
            spacing: 0.4375,
            radius_px: 6.0,
            gamma: 2.0,
            epochs: 300,
            batch_size,
            initial_lr,
            lr_power: 0.9,
            adam: AdamConfig::default(),
            oa_enabled: true,
            oa: OASpec::default(),
            attention_enabled: true,
            seed: 0,
            validation_fraction: 0.1,
            augmentation: AugmentConfig {
                hflip_prob: 0.5,
                zoom_range: (0.7, 1.3),
            },
            model: ModelConfig {
                backbone: BackboneSpec::reference(7),
                head_width: 32,
                attention_reduction: 8,
                heatmap_prior: 0.01,
            },
            eval: EvalConfig {
                threshold_mm: 6.0,
                top_k: 5,
                suppression_px: 12.0,
                curve_thresholds_mm: default_curve_thresholds(),
            },
        }
    }

    pub fn desk() -> Self {
        let paper = RunConfig::paper();
        RunConfig {
            profile: Profile::Desk,
            out_dir: PathBuf::from("runs/desk"),
            canvas: 160,
            crop: 128,
            // Four times coarser than the paper grid: 2 px here is 2.625 mm.
            spacing: 1.3125,
            radius_px: 2.0,
            epochs: 60,
            batch_size: 8,
            initial_lr: 0.005,
            model: ModelConfig {
                backbone: BackboneSpec {
                    name: "tiny_unet".into(),
                    in_channels: 7,
                    widths: vec![16, 32, 64],
                    decoder_channels: 32,
                    feature_channels: 32,
                    feature_size: (16, 16),
                },
                head_width: 16,
                attention_reduction: 8,
                heatmap_prior: 0.01,
            },
            eval: EvalConfig {
                suppression_px: 4.0,
                ..paper.eval.clone()
            },
            ..paper
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => RunConfig::paper(),
            Profile::Desk => RunConfig::desk(),
        }
    }

    /// Switches attention and the paired batch size / learning rate.
    pub fn with_attention(mut self, enabled: bool) -> Self {
        let (b, lr) = default_batch_and_lr(enabled);
        self.attention_enabled = enabled;
        self.batch_size = b;
        self.initial_lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        let positive = [
            ("n_slices", self.n_slices),
            ("canvas", self.canvas),
            ("crop", self.crop),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval.top_k", self.eval.top_k),
            ("model.head_width", self.model.head_width),
            ("model.attention_reduction", self.model.attention_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let positive_real = [
            ("spacing", self.spacing),
            ("radius_px", self.radius_px),
            ("initial_lr", self.initial_lr),
            ("lr_power", self.lr_power),
            ("adam.eps", self.adam.eps),
            ("eval.threshold_mm", self.eval.threshold_mm),
        ];
        for (name, v) in positive_real {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.n_slices.is_multiple_of(2) {
            return bad(format!("n_slices must be odd, got {}", self.n_slices));
        }
        if self.crop > self.canvas {
            return bad(format!("crop {} exceeds canvas {}", self.crop, self.canvas));
        }
        if self.model.backbone.in_channels != self.n_slices {
            return bad(format!(
                "backbone expects {} channels but n_slices is {}",
                self.model.backbone.in_channels, self.n_slices
            ));
        }
        let (fh, fw) = self.model.backbone.feature_size;
        if fh > self.crop || fw > self.crop {
            return bad(format!("feature grid {fh}x{fw} exceeds the {} px crop", self.crop));
        }
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if self.eval.curve_thresholds_mm.iter().any(|t| !(*t > 0.0)) {
            return bad("curve thresholds must be positive".into());
        }
        self.oa.validate().map_err(PipelineError::from)?;
        self.augmentation_spec(0).validate((self.canvas, self.canvas))?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.model.backbone.clone(),
            attention: AttentionSpec {
                enabled: self.attention_enabled,
                reduction: self.model.attention_reduction,
                residual_scale_init: 0.0,
            },
            head_width: self.model.head_width,
            num_classes: 2,
            heatmap_prior: self.model.heatmap_prior,
            init_seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            oa: self.oa_enabled.then_some(self.oa),
        }
    }

    pub fn augmentation_spec(&self, rng_seed: u64) -> AugmentationSpec {
        AugmentationSpec {
            hflip_prob: self.augmentation.hflip_prob,
            zoom_range: self.augmentation.zoom_range,
            crop_size: self.crop,
            rng_seed,
        }
    }

    /// SHA-256 (lowercase hex) of the JSON form, ignoring data and output paths.
    pub fn hash(&self) -> String {
        let stripped = RunConfig {
            train_dir: PathBuf::new(),
            test_dir: None,
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&stripped).expect("config serializes");
        let mut out = String::with_capacity(64);
        for b in Sha256::digest(&bytes) {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }

    /// Builds a config from an optional JSON file and environment overrides.
    /// File keys are merged over the defaults of the file's `profile` (or
    /// `profile` when the file names none).
    pub fn resolve(
        file: Option<&Path>,
        profile: Option<Profile>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let overlay = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
                serde_json::from_str::<Value>(&text).map_err(|source| PipelineError::Json {
                    path: path.to_owned(),
                    source,
                })?
            }
            None => Value::Object(Map::new()),
        };
        let Value::Object(overlay) = overlay else {
            return Err(PipelineError::Config("config file must hold a JSON object".into()));
        };
        let profile = match overlay.get("profile") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| PipelineError::Config(format!("profile: {e}")))?,
            None => profile.unwrap_or(Profile::Paper),
        };
        let mut value = serde_json::to_value(RunConfig::for_profile(profile)).expect("config serializes");
        merge(&mut value, Value::Object(overlay));
        apply_env(&mut value, env)?;
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `SPINEONE_A__B=value` as `config.a.b = value`. Values are parsed
/// as JSON when possible and taken as strings otherwise.
fn apply_env(value: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        let mut slot = &mut *value;
        for (i, part) in path.iter().enumerate() {
            let Value::Object(map) = slot else {
                return Err(PipelineError::Config(format!("{key}: {} is not a section", path[..i].join("."))));
            };
            slot = map
                .get_mut(part)
                .ok_or_else(|| PipelineError::Config(format!("{key}: unknown field {}", path[..=i].join("."))))?;
        }
        *slot = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
    }
    Ok(())
}
