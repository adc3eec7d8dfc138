use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{warp_stack, GeometryTransform};
use crate::anatomy::ExamAnnotation;
use crate::error::{Error, Result};

/// Random horizontal flip, zoom about the image center and crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub hflip_prob: f64,
    pub zoom_range: (f64, f64),
    pub crop_size: usize,
    pub rng_seed: u64,
}

impl AugmentationSpec {
    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        let (lo, hi) = self.zoom_range;
        if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "zoom range ({lo}, {hi}) must lie within [0.5, 2.0]"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidArgument(format!(
                "hflip_prob {} is not a probability",
                self.hflip_prob
            )));
        }
        if self.crop_size == 0 || self.crop_size > image_size.0 || self.crop_size > image_size.1 {
            return Err(Error::InvalidArgument(format!(
                "crop size {} does not fit a {}x{} image",
                self.crop_size, image_size.0, image_size.1
            )));
        }
        Ok(())
    }

    /// Draws one set of augmentation parameters for an image of the given
    /// size.
    pub fn sample<R: Rng>(&self, image_size: (usize, usize), rng: &mut R) -> AugmentParams {
        let flip = rng.random_bool(self.hflip_prob);
        let (lo, hi) = self.zoom_range;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let crop = self.crop_size as f64;
        let mut offset = [0.0; 2];
        for (axis, len) in [image_size.0, image_size.1].into_iter().enumerate() {
            // Zoomed content spans [c - z c, c + z c]; keep the window on it
            // when it is large enough, otherwise keep the content inside the
            // window.
            let c = (len as f64 - 1.0) / 2.0;
            let a = c - zoom * c;
            let b = c + zoom * c - (crop - 1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            offset[axis] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
        AugmentParams { flip, zoom, offset }
    }
}

/// One concrete draw of the augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub zoom: f64,
    /// Top-left corner of the crop window in zoomed coordinates (row, col).
    pub offset: [f64; 2],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            zoom: 1.0,
            offset: [0.0, 0.0],
        }
    }

    /// Affine map from input pixels to crop pixels.
    pub fn transform(&self, image_size: (usize, usize)) -> GeometryTransform {
        let flip = if self.flip {
            GeometryTransform {
                scale: [1.0, -1.0],
                translation: [0.0, image_size.1 as f64 - 1.0],
            }
        } else {
            GeometryTransform::identity()
        };
        let cr = (image_size.0 as f64 - 1.0) / 2.0;
        let cc = (image_size.1 as f64 - 1.0) / 2.0;
        let zoom_crop = GeometryTransform {
            scale: [self.zoom, self.zoom],
            translation: [
                cr - self.zoom * cr - self.offset[0],
                cc - self.zoom * cc - self.offset[1],
            ],
        };
        flip.then(&zoom_crop)
    }
}

/// Applies the same geometric transform to every slice and keypoint.
/// Keypoints that leave the crop are kept but flagged invalid.
pub fn augment_with(
    stack: &Array3<f32>,
    annotation: &ExamAnnotation,
    params: &AugmentParams,
    crop_size: usize,
) -> (Array3<f32>, ExamAnnotation) {
    let (_, h, w) = stack.dim();
    let t = params.transform((h, w));
    let out = if t.is_identity() && h == crop_size && w == crop_size {
        stack.clone()
    } else {
        warp_stack(stack.view(), &t, crop_size, crop_size)
    };
    let max = (crop_size - 1) as f64;
    let mut ann = annotation.clone();
    for kp in &mut ann.keypoints {
        kp.position = t.forward(kp.position);
        let inside = (0.0..=max).contains(&kp.position.row) && (0.0..=max).contains(&kp.position.col);
        kp.valid &= inside;
    }
    (out, ann)
}

/// Seeded augmentation: the output is a pure function of the inputs and
/// `spec.rng_seed`.
pub fn apply_augmentation(
    stack: &Array3<f32>,
    annotation: &ExamAnnotation,
    spec: &AugmentationSpec,
) -> Result<(Array3<f32>, ExamAnnotation)> {
    let (_, h, w) = stack.dim();
    spec.validate((h, w))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let params = spec.sample((h, w), &mut rng);
    Ok(augment_with(stack, annotation, &params, spec.crop_size))
}
