//! Hough voting and keypoint selection.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::anatomy::{Branch, Label, Point};
use crate::error::{Error, Result};
use crate::outputs::ModelOutputs;

/// Per-class accumulated votes, `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoughScoreMap {
    pub scores: Array3<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedKeypoint {
    pub branch: Branch,
    #[serde(flatten)]
    pub position: Point,
    pub label: Label,
    pub score: f64,
}

/// Every pixel splats `p / (pi R^2)` bilinearly at the location its offset
/// points to. Votes outside the grid are dropped.
pub fn hough_vote(heatmap: ArrayView3<f32>, offset: ArrayView3<f32>, radius_px: f64) -> Result<HoughScoreMap> {
    let (c, h, w) = heatmap.dim();
    if offset.dim() != (2 * c, h, w) {
        return Err(Error::shape(&[2 * c, h, w], offset.shape()));
    }
    let norm = 1.0 / (PI * radius_px * radius_px);
    let mut acc = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let heat = heatmap.index_axis(Axis(0), ch);
        let dy = offset.index_axis(Axis(0), 2 * ch);
        let dx = offset.index_axis(Axis(0), 2 * ch + 1);
        let mut out = acc.index_axis_mut(Axis(0), ch);
        for r in 0..h {
            for k in 0..w {
                let p = heat[[r, k]] as f64;
                if p <= 0.0 {
                    continue;
                }
                let ty = r as f64 + dy[[r, k]] as f64;
                let tx = k as f64 + dx[[r, k]] as f64;
                if !(ty > -1.0 && tx > -1.0 && ty < h as f64 && tx < w as f64) {
                    continue;
                }
                let (y0, x0) = (ty.floor(), tx.floor());
                let (fy, fx) = (ty - y0, tx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let vote = p * norm;
                for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                    if yy < 0 || yy >= h as i64 || wy == 0.0 {
                        continue;
                    }
                    for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                        if xx < 0 || xx >= w as i64 || wx == 0.0 {
                            continue;
                        }
                        out[[yy as usize, xx as usize]] += vote * wy * wx;
                    }
                }
            }
        }
    }
    Ok(HoughScoreMap {
        scores: acc.mapv(|v| v as f32),
    })
}

/// Greedy top-`k` selection on the class-collapsed score map. Candidates are
/// visited by descending score (row-major order among ties) and rejected when
/// within `suppression_px` of an accepted point. Positions are refined with
/// the score-weighted centroid of the 3x3 neighbourhood.
pub fn select_top_keypoints(
    score_map: &HoughScoreMap,
    branch: Branch,
    k: usize,
    suppression_px: f64,
) -> Vec<DetectedKeypoint> {
    let (c, h, w) = score_map.scores.dim();
    let mut best = Array2::<f32>::zeros((h, w));
    let mut label = Array2::<usize>::zeros((h, w));
    for ch in 0..c {
        for ((r, x), &s) in score_map.scores.index_axis(Axis(0), ch).indexed_iter() {
            if s > best[[r, x]] {
                best[[r, x]] = s;
                label[[r, x]] = ch;
            }
        }
    }

    let mut candidates: Vec<(usize, usize, f32)> = best
        .indexed_iter()
        .filter(|(_, &s)| s > 0.0)
        .map(|((r, x), &s)| (r, x, s))
        .collect();
    // Stable sort keeps row-major order among equal scores.
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut picked: Vec<(usize, usize, f32)> = Vec::with_capacity(k);
    let limit2 = suppression_px * suppression_px;
    for cand in candidates {
        if picked.len() == k {
            break;
        }
        let clear = picked.iter().all(|p| {
            let (dr, dc) = (p.0 as f64 - cand.0 as f64, p.1 as f64 - cand.1 as f64);
            dr * dr + dc * dc > limit2
        });
        if clear {
            picked.push(cand);
        }
    }

    picked
        .into_iter()
        .map(|(r, x, s)| {
            let mut sum = 0.0;
            let (mut sr, mut sc) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let v = best[[rr, xx]] as f64;
                    sum += v;
                    sr += v * rr as f64;
                    sc += v * xx as f64;
                }
            }
            DetectedKeypoint {
                branch,
                position: Point::new(sr / sum, sc / sum),
                label: Label::from_channel(label[[r, x]]),
                score: s as f64,
            }
        })
        .collect()
}

pub fn to_millimeters(distance_px: f64, spacing: f64) -> f64 {
    distance_px * spacing
}

/// Runs voting and selection for both branches.
pub fn decode_outputs(
    outputs: &ModelOutputs,
    radius_px: f64,
    k: usize,
    suppression_px: f64,
) -> Result<Vec<DetectedKeypoint>> {
    let mut all = Vec::with_capacity(2 * k);
    for branch in Branch::ALL {
        let votes = hough_vote(outputs.heatmap(branch).view(), outputs.offset(branch).view(), radius_px)?;
        all.extend(select_top_keypoints(&votes, branch, k, suppression_px));
    }
    Ok(all)
}
