use ndarray::{s, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::anatomy::{ExamAnnotation, ExamRecord, Point};
use crate::error::{Error, Result};

/// Per-axis affine map `q = scale * p + translation` between two pixel
/// grids. A negative scale encodes a reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryTransform {
    /// (row, col)
    pub scale: [f64; 2],
    /// (row, col)
    pub translation: [f64; 2],
}

impl Default for GeometryTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl GeometryTransform {
    pub fn identity() -> Self {
        GeometryTransform {
            scale: [1.0, 1.0],
            translation: [0.0, 0.0],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn forward(&self, p: Point) -> Point {
        Point::new(
            self.scale[0] * p.row + self.translation[0],
            self.scale[1] * p.col + self.translation[1],
        )
    }

    pub fn inverse(&self, q: Point) -> Point {
        Point::new(
            (q.row - self.translation[0]) / self.scale[0],
            (q.col - self.translation[1]) / self.scale[1],
        )
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &GeometryTransform) -> GeometryTransform {
        GeometryTransform {
            scale: [next.scale[0] * self.scale[0], next.scale[1] * self.scale[1]],
            translation: [
                next.scale[0] * self.translation[0] + next.translation[0],
                next.scale[1] * self.translation[1] + next.translation[1],
            ],
        }
    }
}

/// Bilinear sample with zero padding outside the image.
pub fn sample_bilinear(img: ArrayView2<f32>, row: f64, col: f64) -> f32 {
    let (h, w) = img.dim();
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let mut acc = 0.0f64;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        let r = r0 + dr;
        if r < 0 || r >= h as i64 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let c = c0 + dc;
            if c < 0 || c >= w as i64 {
                continue;
            }
            acc += wr * wc * img[[r as usize, c as usize]] as f64;
        }
    }
    acc as f32
}

/// Resamples every slice of `stack` onto an `out_h x out_w` grid, pulling
/// each output pixel from the inverse-mapped source position.
pub fn warp_stack(
    stack: ArrayView3<f32>,
    transform: &GeometryTransform,
    out_h: usize,
    out_w: usize,
) -> Array3<f32> {
    let n = stack.dim().0;
    let mut out = Array3::<f32>::zeros((n, out_h, out_w));
    let rows: Vec<f64> = (0..out_h)
        .map(|q| (q as f64 - transform.translation[0]) / transform.scale[0])
        .collect();
    let cols: Vec<f64> = (0..out_w)
        .map(|q| (q as f64 - transform.translation[1]) / transform.scale[1])
        .collect();
    for (src, mut dst) in stack.outer_iter().zip(out.outer_iter_mut()) {
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                dst[[i, j]] = sample_bilinear(src, r, c);
            }
        }
    }
    out
}

/// The `n` slices centered on the middle slice, in stored order. The window
/// is shifted inward when the middle slice sits too close to either end.
pub fn select_middle_slices(exam: &ExamRecord, n: usize) -> Result<Array3<f32>> {
    if n.is_multiple_of(2) {
        return Err(Error::EvenSliceCount(n));
    }
    let total = exam.slices.dim().0;
    if n > total {
        return Err(Error::TooFewSlices {
            requested: n,
            available: total,
        });
    }
    let half = n / 2;
    let start = exam.middle_index.saturating_sub(half).min(total - n);
    Ok(exam.slices.slice(s![start..start + n, .., ..]).to_owned())
}

fn axis_map(src_len: usize, src_spacing: f64, target_spacing: f64, canvas: usize) -> (f64, f64) {
    let scale = src_spacing / target_spacing;
    // Centers of the source and canvas coincide.
    let translation = ((canvas as f64 - 1.0) - scale * (src_len as f64 - 1.0)) / 2.0;
    (scale, translation)
}

/// Resamples an exam to `target_spacing` mm/px and center-pads or crops it
/// to a `canvas x canvas` grid. Spacing is preserved exactly; the returned
/// transform maps original pixel coordinates to canvas coordinates.
pub fn align_spacing_and_resize(
    exam: &ExamRecord,
    annotation: &ExamAnnotation,
    target_spacing: f64,
    canvas: usize,
) -> Result<(ExamRecord, ExamAnnotation, GeometryTransform)> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(Error::InvalidSpacing(target_spacing));
    }
    let (_, h, w) = exam.slices.dim();
    let (sr, tr) = axis_map(h, exam.pixel_spacing[0], target_spacing, canvas);
    let (sc, tc) = axis_map(w, exam.pixel_spacing[1], target_spacing, canvas);
    for extent in [sr * h as f64, sc * w as f64] {
        if extent > 2.0 * canvas as f64 {
            return Err(Error::ExtentTooLarge { extent, canvas });
        }
    }
    let transform = GeometryTransform {
        scale: [sr, sc],
        translation: [tr, tc],
    };
    let slices = if transform.is_identity() && h == canvas && w == canvas {
        exam.slices.clone()
    } else {
        warp_stack(exam.slices.view(), &transform, canvas, canvas)
    };
    let aligned = ExamRecord {
        exam_id: exam.exam_id.clone(),
        slices,
        pixel_spacing: [target_spacing, target_spacing],
        slice_interval: exam.slice_interval,
        middle_index: exam.middle_index,
    };
    let mut ann = annotation.clone();
    for kp in &mut ann.keypoints {
        kp.position = transform.forward(kp.position);
    }
    Ok((aligned, ann, transform))
}

/// Zero-mean, unit-variance normalization over the whole stack.
pub fn normalize_intensity(stack: &mut Array3<f32>) {
    let n = stack.len().max(1) as f64;
    let mean = stack.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = stack.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-6);
    stack.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
}

/// Index of the brightest pixel of a slice (row-major first on ties).
#[cfg(test)]
pub(crate) fn argmax2(img: ArrayView2<f32>) -> (usize, usize) {
    let w = img.dim().1;
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &v) in img.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 / w, best.0 % w)
}
