//! Training objectives.
//!
//! All functions are generic over the float type so that the analytic
//! gradients can be checked in `f64`. Heatmap gradients are taken with
//! respect to the predicted probabilities; the network applies the sigmoid
//! derivative itself.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::encoding::{HeatmapTarget, OffsetTarget, TargetMaps};
use crate::error::{Error, Result};
use crate::outputs::ModelOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OANormalization {
    #[default]
    PerChannelMinmax,
}

/// Objective association: the clipped, normalized heatmap-loss gradient
/// reweights the predicted offsets late in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OASpec {
    pub clip_bound: f64,
    pub enable_after_fraction: f64,
    #[serde(default)]
    pub normalization: OANormalization,
}

impl Default for OASpec {
    fn default() -> Self {
        OASpec {
            clip_bound: 100.0,
            enable_after_fraction: 0.75,
            normalization: OANormalization::PerChannelMinmax,
        }
    }
}

impl OASpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip bound must be positive, got {}",
                self.clip_bound
            )));
        }
        if !(self.enable_after_fraction > 0.0 && self.enable_after_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "enable_after_fraction must lie in (0, 1), got {}",
                self.enable_after_fraction
            )));
        }
        Ok(())
    }

    /// First epoch (0-based) at which association is applied.
    pub fn first_active_epoch(&self, total_epochs: usize) -> usize {
        (self.enable_after_fraction * total_epochs as f64).ceil() as usize
    }

    pub fn is_active(&self, state: EpochState) -> bool {
        state.epoch >= self.first_active_epoch(state.total_epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochState {
    pub epoch: usize,
    pub total_epochs: usize,
}

/// Settings shared by every loss evaluation of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// `None` disables association entirely.
    pub oa: Option<OASpec>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            oa: Some(OASpec::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F = f64> {
    pub disc_heatmap: F,
    pub disc_offset: F,
    pub vert_heatmap: F,
    pub vert_offset: F,
    pub total: F,
    pub oa_active: bool,
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("representable")
}

fn check_shape(expected: &[usize], found: &[usize]) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::shape(expected, found))
    }
}

/// Per-pixel focal term and its derivative with respect to `p`, for a pixel
/// whose true state is `positive`.
fn focal_pixel<F: Float>(p: F, positive: bool, gamma: F) -> (F, F) {
    let one = F::one();
    // q: predicted probability of the true state.
    let (q, dq) = if positive { (p, one) } else { (one - p, -one) };
    let m = one - q;
    let loss = -m.powf(gamma) * q.ln();
    let mut d = -m.powf(gamma) / q;
    if gamma != F::zero() {
        d = d + gamma * m.powf(gamma - one) * q.ln();
    }
    (loss, d * dq)
}

fn positive_count<F: Float>(target: ArrayView3<F>) -> F {
    let n = target.iter().filter(|&&t| t > cast(0.5)).count().max(1);
    cast(n as f64)
}

/// Focal loss summed over all pixels and divided by the number of positive
/// pixels (at least one).
pub fn focal_loss<F: Float>(pred: ArrayView3<F>, target: &HeatmapTarget, gamma: F) -> Result<F> {
    focal_loss_grad(pred, target, gamma).map(|(l, _)| l)
}

/// Focal loss and its gradient with respect to `pred`.
pub fn focal_loss_grad<F: Float>(pred: ArrayView3<F>, target: &HeatmapTarget, gamma: F) -> Result<(F, Array3<F>)> {
    check_shape(target.values.shape(), pred.shape())?;
    let t = target.values.mapv(|v| cast::<F>(v as f64));
    let norm = positive_count(t.view());
    let mut grad = Array3::zeros(pred.raw_dim());
    let mut total = F::zero();
    Zip::from(&mut grad).and(&pred).and(&t).for_each(|g, &p, &y| {
        let (l, d) = focal_pixel(p, y > cast(0.5), gamma);
        total = total + l;
        *g = d / norm;
    });
    Ok((total / norm, grad))
}

/// Mean absolute error over masked positions and both coordinate channels.
pub fn offset_l1_loss<F: Float>(pred: ArrayView3<F>, target: &OffsetTarget) -> Result<F> {
    offset_l1_grad(pred, target, None).map(|(l, _)| l)
}

/// L1 loss of `w * pred` against the target (`w = 1` when `weight` is
/// `None`) and its gradient with respect to `pred`. The weight is treated
/// as a constant.
pub fn offset_l1_grad<F: Float>(
    pred: ArrayView3<F>,
    target: &OffsetTarget,
    weight: Option<ArrayView3<F>>,
) -> Result<(F, Array3<F>)> {
    check_shape(target.values.shape(), pred.shape())?;
    if let Some(w) = &weight {
        check_shape(pred.shape(), w.shape())?;
    }
    let (c2, h, w) = pred.dim();
    check_shape(&[c2 / 2, h, w], target.mask.shape())?;
    let mut grad = Array3::zeros(pred.raw_dim());
    let count = 2 * target.mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((F::zero(), grad));
    }
    let n: F = cast(count as f64);
    let mut total = F::zero();
    for ((ch, r, k), &m) in target.mask.indexed_iter() {
        if !m {
            continue;
        }
        for j in [2 * ch, 2 * ch + 1] {
            let wt = weight.as_ref().map_or(F::one(), |w| w[[j, r, k]]);
            let diff = wt * pred[[j, r, k]] - cast(target.values[[j, r, k]] as f64);
            total = total + diff.abs();
            let s = if diff > F::zero() {
                F::one()
            } else if diff < F::zero() {
                -F::one()
            } else {
                F::zero()
            };
            grad[[j, r, k]] = wt * s / n;
        }
    }
    Ok((total / n, grad))
}

/// Offset weights derived from the heatmap-loss gradient: clip, per-channel
/// min-max normalize, add one and repeat each channel for both coordinates.
pub fn oa_weight_map<F: Float>(grad: ArrayView3<F>, spec: &OASpec) -> Array3<F> {
    let (c, h, w) = grad.dim();
    let bound: F = cast(spec.clip_bound);
    let mut out = Array3::zeros((2 * c, h, w));
    for (ch, g) in grad.axis_iter(Axis(0)).enumerate() {
        let clipped = g.mapv(|v| v.max(-bound).min(bound));
        let lo = clipped.iter().copied().fold(F::infinity(), F::min);
        let hi = clipped.iter().copied().fold(F::neg_infinity(), F::max);
        let range = hi - lo;
        let normalized = if range > F::zero() {
            clipped.mapv(|v| (v - lo) / range)
        } else {
            clipped.mapv(|_| F::zero())
        };
        let weight = normalized.mapv(|v| v + F::one());
        out.index_axis_mut(Axis(0), 2 * ch).assign(&weight);
        out.index_axis_mut(Axis(0), 2 * ch + 1).assign(&weight);
    }
    out
}

/// Predictions of one branch: probabilities and offsets.
#[derive(Debug, Clone, Copy)]
pub struct BranchPrediction<'a, F> {
    pub heatmap: ArrayView3<'a, F>,
    pub offset: ArrayView3<'a, F>,
}

/// Gradients of a branch's loss terms with respect to its predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrad<F> {
    pub heatmap: Array3<F>,
    pub offset: Array3<F>,
}

/// Heatmap and offset losses of one branch with gradients. When `oa` is
/// given, the offset loss is evaluated on the association weight times the
/// predicted offset.
pub fn branch_loss<F: Float>(
    pred: BranchPrediction<'_, F>,
    target: &TargetMaps,
    gamma: F,
    oa: Option<&OASpec>,
) -> Result<(F, F, BranchGrad<F>)> {
    let (lh, gh) = focal_loss_grad(pred.heatmap, &target.heatmap, gamma)?;
    let weight = oa.map(|spec| oa_weight_map(gh.view(), spec));
    let (lo, go) = offset_l1_grad(pred.offset, &target.offset, weight.as_ref().map(|w| w.view()))?;
    Ok((
        lh,
        lo,
        BranchGrad {
            heatmap: gh,
            offset: go,
        },
    ))
}

/// The four-term objective with unit coefficients, plus gradients for
/// `[disc, vertebra]`.
pub fn total_loss_grad<F: Float>(
    disc: BranchPrediction<'_, F>,
    vert: BranchPrediction<'_, F>,
    targets: (&TargetMaps, &TargetMaps),
    state: EpochState,
    config: &LossConfig,
) -> Result<(LossBreakdown<F>, [BranchGrad<F>; 2])> {
    let oa = config.oa.filter(|spec| spec.is_active(state));
    let gamma = cast(config.gamma);
    let (dh, d_o, dg) = branch_loss(disc, targets.0, gamma, oa.as_ref())?;
    let (vh, vo, vg) = branch_loss(vert, targets.1, gamma, oa.as_ref())?;
    let breakdown = LossBreakdown {
        disc_heatmap: dh,
        disc_offset: d_o,
        vert_heatmap: vh,
        vert_offset: vo,
        total: dh + d_o + vh + vo,
        oa_active: oa.is_some(),
    };
    Ok((breakdown, [dg, vg]))
}

/// Loss breakdown of a full set of model outputs, evaluated in `f64`.
pub fn total_loss(
    outputs: &ModelOutputs,
    targets: (&TargetMaps, &TargetMaps),
    state: EpochState,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    outputs.validate()?;
    let eps = 1e-12;
    let prob = |a: &Array3<f32>| a.mapv(|v| (v as f64).clamp(eps, 1.0 - eps));
    let wide = |a: &Array3<f32>| a.mapv(|v| v as f64);
    let (dh, d_o, vh, vo) = (
        prob(&outputs.disc_heatmap),
        wide(&outputs.disc_offset),
        prob(&outputs.vert_heatmap),
        wide(&outputs.vert_offset),
    );
    let (breakdown, _) = total_loss_grad(
        BranchPrediction {
            heatmap: dh.view(),
            offset: d_o.view(),
        },
        BranchPrediction {
            heatmap: vh.view(),
            offset: vo.view(),
        },
        targets,
        state,
        config,
    )?;
    Ok(breakdown)
}
