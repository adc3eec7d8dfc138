//! Procedural spine phantoms.
//!
//! Each phantom is a sagittal stack showing five rounded-rectangle vertebrae
//! alternating with five elliptical discs along a tilted, gently curved
//! column, a sacrum below and a bright spinal canal behind it. Degenerative
//! structures are drawn flatter and darker. Anatomical sizes are physical
//! millimeters, so mm-based evaluation thresholds keep their meaning.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anatomy::{
    Branch, ExamAnnotation, ExamRecord, KeypointAnnotation, Label, Point, Structure,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub count: usize,
    /// Square slice size in pixels.
    pub image_size: usize,
    /// mm per pixel.
    pub pixel_spacing: f64,
    /// Independent per-structure probability of the degenerative label.
    pub degenerative_rate: f64,
    /// Scale of the random geometric variation; 0 gives a canonical spine.
    pub jitter: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            count: 200,
            image_size: 640,
            pixel_spacing: 0.4375,
            degenerative_rate: 0.3,
            jitter: 1.0,
            rng_seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("phantom count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.degenerative_rate) {
            return Err(Error::InvalidArgument(format!(
                "degenerative_rate {} is not a probability",
                self.degenerative_rate
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidArgument("phantom image_size must be >= 32".into()));
        }
        if !(self.pixel_spacing > 0.0) {
            return Err(Error::InvalidSpacing(self.pixel_spacing));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidArgument("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smallest field of view that holds the whole column.
const MIN_FOV_MM: f64 = 205.0;
const BACKGROUND: f32 = 0.12;
const NOISE_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Disc,
    Vertebra,
    Sacrum,
    Canal,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: Kind,
    structure: Option<Structure>,
    label: Label,
    center: Point,
    half_len: f64,
    half_width: f64,
    /// Rotation of the shape's long axis away from vertical, radians.
    angle: f64,
    intensity: f32,
}

impl Shape {
    fn exponent(&self) -> f64 {
        match self.kind {
            Kind::Disc | Kind::Canal => 2.0,
            Kind::Vertebra => 4.0,
            Kind::Sacrum => 3.0,
        }
    }

    /// Anti-aliased coverage of pixel (r, c) in [0, 1].
    fn coverage(&self, r: f64, c: f64, half_width: f64) -> f32 {
        let (dr, dc) = (r - self.center.row, c - self.center.col);
        let (sin, cos) = self.angle.sin_cos();
        let along = dr * cos + dc * sin;
        let across = -dr * sin + dc * cos;
        let p = self.exponent();
        let rho = (along.abs() / self.half_len).powf(p) + (across.abs() / half_width).powf(p);
        let signed = (rho.powf(1.0 / p) - 1.0) * self.half_len.min(half_width);
        (0.5 - signed).clamp(0.0, 1.0) as f32
    }
}

struct Layout {
    shapes: Vec<Shape>,
    n_slices: usize,
    middle: usize,
    slice_interval: f64,
    gain: f32,
}

/// Pixels per anatomical millimeter. Anatomy keeps its physical size unless
/// the field of view is too small for it, in which case it shrinks to fit.
fn px_per_mm(spec: &PhantomSpec) -> f64 {
    let size = spec.image_size as f64;
    (1.0 / spec.pixel_spacing).min(size / MIN_FOV_MM)
}

fn signed_unit<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-1.0..=1.0)
}

fn layout(spec: &PhantomSpec, index: usize) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);
    let j = spec.jitter;
    let size = spec.image_size as f64;
    let mm = px_per_mm(spec);

    let n_slices = rng.random_range(7..=11usize);
    let middle = n_slices / 2;
    let slice_interval = rng.random_range(4.4..=4.6);
    let gain = (1.0 + 0.15 * j * signed_unit(&mut rng)) as f32;

    let tilt = (6.0 * j * signed_unit(&mut rng)).to_radians();
    let curve = (7.0 + 3.0 * j * signed_unit(&mut rng)) * mm;
    let x0 = size / 2.0 + 0.06 * j * size * signed_unit(&mut rng);
    let top = 18.0 * mm + 6.0 * j * mm * signed_unit(&mut rng);

    let labels: Vec<Label> = (0..10)
        .map(|_| {
            if rng.random_bool(spec.degenerative_rate) {
                Label::Degenerative
            } else {
                Label::Normal
            }
        })
        .collect();

    // Lengths along the column axis, top to bottom: V1 D1 V2 D2 ... V5 D5.
    let mut segments = Vec::with_capacity(10);
    for level in 0..5 {
        for branch in [Branch::Vertebra, Branch::Disc] {
            let s = Structure::of(branch, level);
            let label = labels[s as usize];
            let (len, width, intensity) = match (branch, label) {
                (Branch::Vertebra, Label::Normal) => (25.0, 38.0, 0.50),
                (Branch::Vertebra, Label::Degenerative) => (25.0 * 0.78, 39.0, 0.32),
                (Branch::Disc, Label::Normal) => (9.5, 36.0, 0.85),
                (Branch::Disc, Label::Degenerative) => (9.5 * 0.6, 37.0, 0.40),
            };
            let len = len * (1.0 + 0.06 * j * signed_unit(&mut rng)) * mm;
            let width = width * (1.0 + 0.05 * j * signed_unit(&mut rng)) * mm;
            let intensity = intensity * (1.0 + 0.05 * j * signed_unit(&mut rng));
            segments.push((s, label, len, width, intensity as f32));
        }
    }
    let total: f64 = segments.iter().map(|s| s.2).sum();

    let (sin, cos) = tilt.sin_cos();
    let place = |u: f64, lateral: f64| {
        Point::new(top + u * cos - lateral * sin, x0 + u * sin + lateral * cos)
    };
    let bend = |u: f64| curve * (std::f64::consts::PI * u / total).sin();
    let slope = |u: f64| {
        (curve * std::f64::consts::PI / total * (std::f64::consts::PI * u / total).cos()).atan()
    };

    let mut shapes = Vec::with_capacity(40);
    let mut u = 0.0;
    for (s, label, len, width, intensity) in segments {
        let mid = u + len / 2.0;
        shapes.push(Shape {
            kind: match s.branch() {
                Branch::Disc => Kind::Disc,
                Branch::Vertebra => Kind::Vertebra,
            },
            structure: Some(s),
            label,
            center: place(mid, bend(mid)),
            half_len: len / 2.0,
            half_width: width / 2.0,
            angle: tilt + slope(mid),
            intensity,
        });
        u += len;
    }
    let sacrum_len = 30.0 * mm;
    let mid = u + sacrum_len / 2.0;
    shapes.push(Shape {
        kind: Kind::Sacrum,
        structure: None,
        label: Label::Normal,
        center: place(mid, bend(total) - 6.0 * mm),
        half_len: sacrum_len / 2.0,
        half_width: 20.0 * mm,
        angle: tilt + 0.45,
        intensity: 0.42,
    });
    // Spinal canal: a tube of small ellipses behind the column.
    let canal_offset = 25.0 * mm;
    let step = 2.0 * mm;
    let mut v = -10.0 * mm;
    while v < total + 10.0 * mm {
        shapes.push(Shape {
            kind: Kind::Canal,
            structure: None,
            label: Label::Normal,
            center: place(v, bend(v.clamp(0.0, total)) + canal_offset),
            half_len: 3.0 * mm,
            half_width: 3.0 * mm,
            angle: 0.0,
            intensity: 0.62,
        });
        v += step;
    }

    Layout {
        shapes,
        n_slices,
        middle,
        slice_interval,
        gain,
    }
}

fn annotation_of(layout: &Layout, exam_id: &str) -> ExamAnnotation {
    let mut keypoints: Vec<KeypointAnnotation> = layout
        .shapes
        .iter()
        .filter_map(|s| {
            s.structure
                .map(|structure| KeypointAnnotation::new(structure, s.center, s.label))
        })
        .collect();
    keypoints.sort_by_key(|k| k.structure);
    ExamAnnotation {
        exam_id: exam_id.to_owned(),
        keypoints,
    }
}

fn exam_id(index: usize) -> String {
    format!("{index:04}")
}

/// Ground-truth geometry and labels of phantom `index` without rendering.
pub fn phantom_annotation(spec: &PhantomSpec, index: usize) -> ExamAnnotation {
    annotation_of(&layout(spec, index), &exam_id(index))
}

/// Renders phantom `index`. Fully determined by `(spec.rng_seed, index)`.
pub fn generate_phantom_exam(spec: &PhantomSpec, index: usize) -> Result<(ExamRecord, ExamAnnotation)> {
    spec.validate()?;
    if index >= spec.count {
        return Err(Error::InvalidArgument(format!(
            "phantom index {index} out of range for count {}",
            spec.count
        )));
    }
    let layout = layout(spec, index);
    let size = spec.image_size;
    let mm = px_per_mm(spec);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x05ee_d0f7_015e);
    noise_rng.set_stream(index as u64);

    let mut slices = Array3::<f32>::zeros((layout.n_slices, size, size));
    for (k, mut slice) in slices.outer_iter_mut().enumerate() {
        let off_mm = (k as f64 - layout.middle as f64) * layout.slice_interval;
        let lateral = (1.0 - (off_mm / 25.0).powi(2)).max(0.0).sqrt();
        let canal_vis = (-(off_mm / 6.0).powi(2)).exp() as f32;
        let shift = if k == layout.middle {
            0.0
        } else {
            0.5 * spec.jitter * signed_unit(&mut noise_rng) * mm
        };
        slice.fill(BACKGROUND);
        for shape in &layout.shapes {
            let (width, strength) = match shape.kind {
                Kind::Canal => (shape.half_width, canal_vis),
                _ => (
                    shape.half_width * (0.5 + 0.5 * lateral),
                    (0.4 + 0.6 * lateral) as f32,
                ),
            };
            let target = shape.intensity * strength;
            let reach = shape.half_len.max(width) + 2.0;
            let c_col = shape.center.col + shift;
            let r_lo = (shape.center.row - reach).floor().max(0.0) as usize;
            let r_hi = ((shape.center.row + reach).ceil() as usize).min(size - 1);
            let c_lo = (c_col - reach).floor().max(0.0) as usize;
            let c_hi = ((c_col + reach).ceil() as usize).min(size - 1);
            if r_lo > r_hi || c_lo > c_hi {
                continue;
            }
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let alpha = shape.coverage(r as f64, c as f64 - shift, width);
                    if alpha > 0.0 {
                        let px = &mut slice[[r, c]];
                        *px = *px * (1.0 - alpha) + target * alpha;
                    }
                }
            }
        }
        for px in slice.iter_mut() {
            let n: f32 = noise_rng.sample(StandardNormal);
            *px = (*px * layout.gain + NOISE_STD * n).clamp(0.0, 1.0);
        }
    }

    let id = exam_id(index);
    let exam = ExamRecord {
        exam_id: id.clone(),
        slices,
        pixel_spacing: [spec.pixel_spacing, spec.pixel_spacing],
        slice_interval: layout.slice_interval,
        middle_index: layout.middle,
    };
    Ok((exam, annotation_of(&layout, &id)))
}
