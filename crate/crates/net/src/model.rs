use ndarray::{s, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DualAttention;
use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{NetError, Result};
use crate::head::Head;
use crate::layers::Resize;
use crate::param::{join, Module, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub enabled: bool,
    /// Key/query channel reduction of position attention.
    pub reduction: usize,
    pub residual_scale_init: f32,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            enabled: true,
            reduction: 8,
            residual_scale_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub attention: AttentionSpec,
    pub head_width: usize,
    pub num_classes: usize,
    /// Initial heatmap probability.
    pub heatmap_prior: f32,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl ModelSpec {
    /// 32/64/128/256 encoder, 64-channel 128x128 features, 32-wide heads.
    pub fn reference(in_channels: usize) -> Self {
        ModelSpec {
            backbone: BackboneSpec::reference(in_channels),
            attention: AttentionSpec::default(),
            head_width: 32,
            num_classes: 2,
            heatmap_prior: 0.01,
            init_seed: 0,
        }
    }

    /// Smallest accepted input side: the global feature grid.
    pub fn min_input(&self) -> (usize, usize) {
        self.backbone.feature_size
    }
}

/// Raw network outputs for a batch, all on the input grid: heatmap logits
/// `(B, C, H, W)` and offsets in input pixels `(B, 2C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub disc_logits: Array4<f32>,
    pub disc_offset: Array4<f32>,
    pub vert_logits: Array4<f32>,
    pub vert_offset: Array4<f32>,
}

/// Probabilities and offsets of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    pub disc_heatmap: Array3<f32>,
    pub disc_offset: Array3<f32>,
    pub vert_heatmap: Array3<f32>,
    pub vert_offset: Array3<f32>,
}

/// Largest `f32` below one; keeps probabilities strictly inside `(0, 1)`.
const ONE_MINUS: f32 = 1.0 - f32::EPSILON / 2.0;

pub fn sigmoid(z: f32) -> f32 {
    let p = 1.0 / (1.0 + (-(z as f64)).exp());
    (p as f32).clamp(f32::MIN_POSITIVE, ONE_MINUS)
}

impl RawOutputs {
    pub fn batch_size(&self) -> usize {
        self.disc_logits.dim().0
    }

    /// Sample `b` with sigmoid applied to the heatmaps.
    pub fn sample(&self, b: usize) -> SampleOutputs {
        let take = |a: &Array4<f32>| a.slice(s![b, .., .., ..]).to_owned();
        SampleOutputs {
            disc_heatmap: take(&self.disc_logits).mapv(sigmoid),
            disc_offset: take(&self.disc_offset),
            vert_heatmap: take(&self.vert_logits).mapv(sigmoid),
            vert_offset: take(&self.vert_offset),
        }
    }
}

/// Attention plus heatmap and offset heads of one anatomical branch.
#[derive(Debug, Clone)]
pub struct BranchNet {
    pub attention: Option<DualAttention>,
    pub heatmap: Head,
    pub offset: Head,
    heat_up: Resize,
    offset_up: Resize,
    offset_scale: (f32, f32),
}

impl BranchNet {
    fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let c = spec.backbone.feature_channels;
        let attention = spec
            .attention
            .enabled
            .then(|| DualAttention::new(c, spec.attention.reduction, spec.attention.residual_scale_init, rng));
        BranchNet {
            attention,
            heatmap: Head::with_prior(c, spec.head_width, spec.num_classes, spec.heatmap_prior, rng),
            offset: Head::new(c, spec.head_width, 2 * spec.num_classes, rng),
            heat_up: Resize::default(),
            offset_up: Resize::default(),
            offset_scale: (1.0, 1.0),
        }
    }

    fn forward(&mut self, u: &Array4<f32>, out_hw: (usize, usize), train: bool) -> (Array4<f32>, Array4<f32>) {
        let attended;
        let feat = match &mut self.attention {
            Some(att) => {
                attended = att.forward(u, train);
                &attended
            }
            None => u,
        };
        let (gh, gw) = (u.dim().2, u.dim().3);
        let heat = self.heatmap.forward(feat, train);
        let heat = self.heat_up.forward(&heat, out_hw.0, out_hw.1);
        let off = self.offset.forward(feat, train);
        let mut off = self.offset_up.forward(&off, out_hw.0, out_hw.1);
        self.offset_scale = (out_hw.0 as f32 / gh as f32, out_hw.1 as f32 / gw as f32);
        scale_offsets(&mut off, self.offset_scale);
        (heat, off)
    }

    fn backward(&mut self, d_heat: &Array4<f32>, d_off: &Array4<f32>) -> Array4<f32> {
        let mut d_off = d_off.clone();
        scale_offsets(&mut d_off, self.offset_scale);
        let d_off = self.offset_up.backward(&d_off);
        let mut du = self.offset.backward(&d_off);
        let d_heat = self.heat_up.backward(d_heat);
        du += &self.heatmap.backward(&d_heat);
        match &mut self.attention {
            Some(att) => att.backward(&du),
            None => du,
        }
    }
}

/// Even channels hold rows, odd channels columns.
fn scale_offsets(off: &mut Array4<f32>, (sy, sx): (f32, f32)) {
    for c in 0..off.dim().1 {
        let k = if c % 2 == 0 { sy } else { sx };
        off.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v * k);
    }
}

impl Module for BranchNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(att) = &mut self.attention {
            att.visit(&join(prefix, "attention"), f);
        }
        self.heatmap.visit(&join(prefix, "heatmap"), f);
        self.offset.visit(&join(prefix, "offset"), f);
    }
}

/// The full detector: shared backbone, then one attention + heads branch
/// for discs and one for vertebrae.
#[derive(Debug, Clone)]
pub struct SpineNet {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub disc: BranchNet,
    pub vert: BranchNet,
}

impl SpineNet {
    pub fn new(spec: ModelSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let backbone = Backbone::new(spec.backbone.clone(), &mut rng);
        let disc = BranchNet::new(&spec, &mut rng);
        let vert = BranchNet::new(&spec, &mut rng);
        SpineNet {
            spec,
            backbone,
            disc,
            vert,
        }
    }

    pub fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.backbone.in_channels {
            return Err(NetError::ChannelMismatch {
                expected: self.spec.backbone.in_channels,
                found: c,
            });
        }
        let (mh, mw) = self.spec.min_input();
        if h < mh || w < mw {
            return Err(NetError::TooSmall {
                height: h,
                width: w,
                min_height: mh,
                min_width: mw,
            });
        }
        Ok(())
    }

    /// Global feature map of the backbone.
    pub fn features(&mut self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        Ok(self.backbone.forward(x, false))
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Result<RawOutputs> {
        self.check_input(x)?;
        let out_hw = (x.dim().2, x.dim().3);
        let u = self.backbone.forward(x, train);
        let (disc_logits, disc_offset) = self.disc.forward(&u, out_hw, train);
        let (vert_logits, vert_offset) = self.vert.forward(&u, out_hw, train);
        Ok(RawOutputs {
            disc_logits,
            disc_offset,
            vert_logits,
            vert_offset,
        })
    }

    /// Accumulates parameter gradients given gradients with respect to the
    /// outputs of the last training forward pass.
    pub fn backward(&mut self, grads: &RawOutputs) {
        let mut du = self.disc.backward(&grads.disc_logits, &grads.disc_offset);
        du += &self.vert.backward(&grads.vert_logits, &grads.vert_offset);
        self.backbone.backward(&du);
    }

    /// Evaluation-mode forward returning per-sample probabilities.
    pub fn predict(&mut self, x: &Array4<f32>) -> Result<Vec<SampleOutputs>> {
        let raw = self.forward(x, false)?;
        Ok((0..raw.batch_size()).map(|b| raw.sample(b)).collect())
    }
}

impl Module for SpineNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.disc.visit(&join(prefix, "disc"), f);
        self.vert.visit(&join(prefix, "vert"), f);
    }
}
