use ndarray::Array4;
use rand::Rng;

use crate::layers::{Conv2d, ConvBnRelu};
use crate::param::{join, Module, Param};

/// Two 3x3 conv + BN + ReLU stages followed by a 1x1 projection.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    pub out: Conv2d,
}

impl Head {
    pub fn new<R: Rng>(in_channels: usize, width: usize, out_channels: usize, rng: &mut R) -> Self {
        Head {
            conv1: ConvBnRelu::new(Conv2d::k3(in_channels, width, 1, rng)),
            conv2: ConvBnRelu::new(Conv2d::k3(width, width, 1, rng)),
            out: Conv2d::k1(width, out_channels, 1, rng),
        }
    }

    /// Heatmap head whose initial output probability is `prior` everywhere.
    pub fn with_prior<R: Rng>(in_channels: usize, width: usize, out_channels: usize, prior: f32, rng: &mut R) -> Self {
        let mut head = Head::new(in_channels, width, out_channels, rng);
        head.out.bias.value.fill(-((1.0 - prior) / prior).ln());
        head
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = self.conv1.forward(x, train);
        let y = self.conv2.forward(&y, train);
        self.out.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.out.backward(dy);
        let d = self.conv2.backward(&d);
        self.conv1.backward(&d)
    }
}

impl Module for Head {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}
