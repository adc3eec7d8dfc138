use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorRecord;
use crate::param::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the module's parameter
/// visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let inv_c2_sqrt = (1.0 / c2.sqrt()) as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
        let moments = &mut self.moments;
        let mut k = 0;
        model.visit("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if moments.len() == k {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[k];
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step_size * *m / ((*v).sqrt() * inv_c2_sqrt + eps);
                });
            k += 1;
        });
    }
}

/// Serializable snapshot of the optimizer for resuming a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    /// First and second moments per trainable parameter, in visiting order.
    pub moments: Vec<(TensorRecord, TensorRecord)>,
}

fn record(a: &ArrayD<f32>) -> TensorRecord {
    TensorRecord {
        shape: a.shape().to_vec(),
        data: a.iter().copied().collect(),
    }
}

fn array(r: &TensorRecord) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(&r.shape), r.data.clone()).expect("record length matches its shape")
}

impl Adam {
    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            moments: self.moments.iter().map(|(m, v)| (record(m), record(v))).collect(),
        }
    }

    pub fn from_state(config: AdamConfig, state: &AdamState) -> Self {
        Adam {
            config,
            step: state.step,
            moments: state.moments.iter().map(|(m, v)| (array(m), array(v))).collect(),
        }
    }
}

/// `lr0 * (1 - i / T)^power` for epoch `i` of `T`.
pub fn poly_lr(lr0: f64, epoch: usize, total_epochs: usize, power: f64) -> f64 {
    lr0 * (1.0 - epoch as f64 / total_epochs as f64).max(0.0).powf(power)
}
