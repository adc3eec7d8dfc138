//! Dense training targets: the binary one-channel-per-class (OCPC) heatmap
//! and the short-range offset field.
//!
//! For a keypoint `y` of class `c`, every pixel center `x` with
//! `|x - y| <= R` is set to 1 in heatmap channel `c`, and offset channels
//! `(2c, 2c + 1)` hold the `(row, col)` components of `y - x`. All keypoints
//! of one class share a channel.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::anatomy::{Branch, ExamAnnotation, Label, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub radius_px: f64,
    pub num_classes: usize,
    /// (H, W)
    pub grid: (usize, usize),
}

impl EncodingSpec {
    pub fn new(radius_px: f64, grid: (usize, usize)) -> Self {
        EncodingSpec {
            radius_px,
            num_classes: 2,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_px > 0.0 && self.radius_px.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "radius must be positive, got {}",
                self.radius_px
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidArgument(format!(
                "expected 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        Ok(())
    }
}

/// `C x H x W`, entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub values: Array3<f32>,
}

/// `2C x H x W` offsets in pixels plus the `C x H x W` support mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTarget {
    pub values: Array3<f32>,
    pub mask: Array3<bool>,
}

/// Heatmap and offset targets of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub heatmap: HeatmapTarget,
    pub offset: OffsetTarget,
}

impl TargetMaps {
    pub fn positives(&self) -> usize {
        self.offset.mask.iter().filter(|&&m| m).count()
    }
}

/// Integer pixel centers inside the closed disk of `radius` around `center`,
/// clipped to the grid.
fn disk_pixels(center: Point, radius: f64, grid: (usize, usize)) -> impl Iterator<Item = (usize, usize)> {
    let r2 = radius * radius;
    let r_lo = (center.row - radius).ceil().max(0.0) as usize;
    let r_hi = (center.row + radius).floor().min(grid.0 as f64 - 1.0);
    let c_lo = (center.col - radius).ceil().max(0.0) as usize;
    let c_hi = (center.col + radius).floor().min(grid.1 as f64 - 1.0);
    let (r_hi, c_hi) = (r_hi as i64, c_hi as i64);
    (r_lo as i64..=r_hi).flat_map(move |r| {
        (c_lo as i64..=c_hi).filter_map(move |c| {
            let (dr, dc) = (r as f64 - center.row, c as f64 - center.col);
            (dr * dr + dc * dc <= r2).then_some((r as usize, c as usize))
        })
    })
}

fn check_inside(p: Point, grid: (usize, usize)) -> Result<()> {
    let inside = (0.0..=(grid.0 - 1) as f64).contains(&p.row) && (0.0..=(grid.1 - 1) as f64).contains(&p.col);
    if inside {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "keypoint ({}, {}) outside the {}x{} grid",
            p.row, p.col, grid.0, grid.1
        )))
    }
}

/// Encodes heatmap and offsets in one pass.
pub fn encode_targets(keypoints: &[(Point, Label)], spec: &EncodingSpec) -> Result<TargetMaps> {
    spec.validate()?;
    let (h, w) = spec.grid;
    let c = spec.num_classes;
    let mut heat = Array3::<f32>::zeros((c, h, w));
    let mut offset = Array3::<f32>::zeros((2 * c, h, w));
    let mut mask = Array3::<bool>::from_elem((c, h, w), false);
    for &(y, label) in keypoints {
        check_inside(y, spec.grid)?;
        let ch = label.channel();
        for (r, col) in disk_pixels(y, spec.radius_px, spec.grid) {
            if mask[[ch, r, col]] {
                return Err(Error::OverlapViolation {
                    channel: ch,
                    row: r,
                    col,
                });
            }
            mask[[ch, r, col]] = true;
            heat[[ch, r, col]] = 1.0;
            offset[[2 * ch, r, col]] = (y.row - r as f64) as f32;
            offset[[2 * ch + 1, r, col]] = (y.col - col as f64) as f32;
        }
    }
    Ok(TargetMaps {
        heatmap: HeatmapTarget { values: heat },
        offset: OffsetTarget {
            values: offset,
            mask,
        },
    })
}

pub fn encode_heatmap(keypoints: &[(Point, Label)], spec: &EncodingSpec) -> Result<HeatmapTarget> {
    encode_targets(keypoints, spec).map(|t| t.heatmap)
}

pub fn encode_offset(keypoints: &[(Point, Label)], spec: &EncodingSpec) -> Result<OffsetTarget> {
    encode_targets(keypoints, spec).map(|t| t.offset)
}

/// Disc and vertebra targets for one annotation. Invalid keypoints (cropped
/// away by augmentation) are skipped.
pub fn encode_exam_targets(annotation: &ExamAnnotation, spec: &EncodingSpec) -> Result<(TargetMaps, TargetMaps)> {
    let branch = |b: Branch| -> Vec<(Point, Label)> {
        annotation
            .branch(b)
            .filter(|k| k.valid)
            .map(|k| (k.position, k.label))
            .collect()
    };
    Ok((
        encode_targets(&branch(Branch::Disc), spec)?,
        encode_targets(&branch(Branch::Vertebra), spec)?,
    ))
}
