//! Residual encoder with a top-down decoder. The stem and each stage halve
//! the resolution, so stage `j` runs at stride `2^(j + 2)`; the decoder
//! merges all stages back at stride 4 and projects to the feature width.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{BatchNorm2d, Conv2d, ConvBnRelu, Relu, Resize};
use crate::param::{join, Module, Param};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub in_channels: usize,
    /// Output widths of the encoder stages.
    pub widths: Vec<usize>,
    pub decoder_channels: usize,
    pub feature_channels: usize,
    /// `(H, W)` of the global feature map.
    pub feature_size: (usize, usize),
}

impl BackboneSpec {
    pub fn reference(in_channels: usize) -> Self {
        BackboneSpec {
            name: "reference_unet".into(),
            in_channels,
            widths: vec![32, 64, 128, 256],
            decoder_channels: 64,
            feature_channels: 64,
            feature_size: (128, 128),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvBnRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Conv2d,
    pub shortcut_bn: BatchNorm2d,
    relu: Relu,
}

impl ResidualBlock {
    pub fn new<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        ResidualBlock {
            conv1: ConvBnRelu::new(Conv2d::k3(cin, cout, stride, rng)),
            conv2: Conv2d::k3(cout, cout, 1, rng),
            bn2: BatchNorm2d::new(cout),
            shortcut: Conv2d::k1(cin, cout, stride, rng),
            shortcut_bn: BatchNorm2d::new(cout),
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = self.conv1.forward(x, train);
        let y = self.conv2.forward(&y, train);
        let y = self.bn2.forward(&y, train);
        let s = self.shortcut.forward(x, train);
        let s = self.shortcut_bn.forward(&s, train);
        self.relu.forward(&(y + s), train)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.relu.backward(dy);
        let ds = self.shortcut_bn.backward(&d);
        let ds = self.shortcut.backward(&ds);
        let dm = self.bn2.backward(&d);
        let dm = self.conv2.backward(&dm);
        let dm = self.conv1.backward(&dm);
        dm + ds
    }
}

impl Module for ResidualBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
        self.shortcut_bn.visit(&join(prefix, "shortcut_bn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub stem: ConvBnRelu,
    pub stages: Vec<ResidualBlock>,
    pub laterals: Vec<Conv2d>,
    pub fuse: ConvBnRelu,
    ups: Vec<Resize>,
    out_resize: Resize,
    stage_sizes: Vec<(usize, usize)>,
}

impl Backbone {
    pub fn new<R: Rng>(spec: BackboneSpec, rng: &mut R) -> Self {
        assert!(!spec.widths.is_empty(), "backbone needs at least one stage");
        let stem = ConvBnRelu::new(Conv2d::k3(spec.in_channels, spec.widths[0], 2, rng));
        let mut stages = Vec::new();
        let mut prev = spec.widths[0];
        for &w in &spec.widths {
            stages.push(ResidualBlock::new(prev, w, 2, rng));
            prev = w;
        }
        let laterals = spec
            .widths
            .iter()
            .map(|&w| Conv2d::k1(w, spec.decoder_channels, 1, rng))
            .collect();
        let fuse = ConvBnRelu::new(Conv2d::k3(spec.decoder_channels, spec.feature_channels, 1, rng));
        let ups = vec![Resize::default(); spec.widths.len().saturating_sub(1)];
        Backbone {
            spec,
            stem,
            stages,
            laterals,
            fuse,
            ups,
            out_resize: Resize::default(),
            stage_sizes: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let mut h = self.stem.forward(x, train);
        let mut feats = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            h = stage.forward(&h, train);
            feats.push(h.clone());
        }
        self.stage_sizes = feats.iter().map(|f| (f.dim().2, f.dim().3)).collect();
        let last = feats.len() - 1;
        let mut top = self.laterals[last].forward(&feats[last], train);
        for j in (0..last).rev() {
            let (th, tw) = self.stage_sizes[j];
            let up = self.ups[j].forward(&top, th, tw);
            top = up + self.laterals[j].forward(&feats[j], train);
        }
        let fused = self.fuse.forward(&top, train);
        let (fh, fw) = self.spec.feature_size;
        self.out_resize.forward(&fused, fh, fw)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.out_resize.backward(dy);
        let mut d_top = self.fuse.backward(&d);
        let last = self.stages.len() - 1;
        let mut d_feats: Vec<Option<Array4<f32>>> = vec![None; self.stages.len()];
        for j in 0..last {
            d_feats[j] = Some(self.laterals[j].backward(&d_top));
            d_top = self.ups[j].backward(&d_top);
        }
        d_feats[last] = Some(self.laterals[last].backward(&d_top));
        let mut d_h: Option<Array4<f32>> = None;
        for j in (0..self.stages.len()).rev() {
            let mut g = d_feats[j].take().expect("lateral gradient");
            if let Some(dh) = d_h.take() {
                g += &dh;
            }
            d_h = Some(self.stages[j].backward(&g));
        }
        self.stem.backward(&d_h.expect("at least one stage"))
    }
}

impl Module for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (j, s) in self.stages.iter_mut().enumerate() {
            s.visit(&join(prefix, &format!("stage{j}")), f);
        }
        for (j, l) in self.laterals.iter_mut().enumerate() {
            l.visit(&join(prefix, &format!("lateral{j}")), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }
}
