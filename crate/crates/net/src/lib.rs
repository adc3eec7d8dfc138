//! The detection network and its training machinery, on `ndarray` with
//! hand-written backward passes.
//!
//! Tensors are `(batch, channel, height, width)` `f32` arrays. Layers cache
//! what they need during a training-mode forward pass; `backward` consumes
//! that cache, accumulates parameter gradients and returns the gradient with
//! respect to the layer input.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod head;
pub mod layers;
pub mod model;
pub mod optim;
pub mod param;
#[cfg(test)]
mod testutil;

pub use attention::{ChannelAttention, DualAttention, PositionAttention};
pub use backbone::{Backbone, BackboneSpec};
pub use checkpoint::{load_params, read_optimizer, save_optimizer, save_params, StateDict};
pub use error::{NetError, Result};
pub use head::Head;
pub use model::{sigmoid, AttentionSpec, ModelSpec, RawOutputs, SampleOutputs, SpineNet};
pub use optim::{poly_lr, Adam, AdamConfig, AdamState};
pub use param::{Module, Param};
