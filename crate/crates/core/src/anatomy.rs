//! Exam and annotation types for the lumbar spine.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of sagittal slices an exam must carry.
pub const MIN_SLICES: usize = 7;

/// The ten annotated lumbar structures. `D1` is the L1-L2 disc, `V1` the L1
/// vertebra; both sequences run top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    D1,
    D2,
    D3,
    D4,
    D5,
    V1,
    V2,
    V3,
    V4,
    V5,
}

impl Structure {
    pub const ALL: [Structure; 10] = [
        Structure::D1,
        Structure::D2,
        Structure::D3,
        Structure::D4,
        Structure::D5,
        Structure::V1,
        Structure::V2,
        Structure::V3,
        Structure::V4,
        Structure::V5,
    ];

    pub fn branch(self) -> Branch {
        match self {
            Structure::D1 | Structure::D2 | Structure::D3 | Structure::D4 | Structure::D5 => {
                Branch::Disc
            }
            _ => Branch::Vertebra,
        }
    }

    /// Lumbar level, 0 for L1 (or L1-L2) through 4.
    pub fn level(self) -> usize {
        (self as usize) % 5
    }

    pub fn of(branch: Branch, level: usize) -> Structure {
        assert!(level < 5, "lumbar level out of range");
        let base = match branch {
            Branch::Disc => 0,
            Branch::Vertebra => 5,
        };
        Structure::ALL[base + level]
    }
}

/// Which of the two detection branches a structure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Disc,
    Vertebra,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Disc, Branch::Vertebra];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Disc => "disc",
            Branch::Vertebra => "vertebra",
        }
    }
}

/// Binary degeneration class. The discriminant is the heatmap channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Degenerative,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Degenerative];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn from_channel(channel: usize) -> Label {
        match channel {
            0 => Label::Normal,
            _ => Label::Degenerative,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Degenerative => "degenerative",
        }
    }
}

/// Sub-pixel image position. Integer coordinates are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub fn new(row: f64, col: f64) -> Self {
        Point { row, col }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

fn valid_default() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub structure: Structure,
    #[serde(flatten)]
    pub position: Point,
    pub label: Label,
    /// Cleared when augmentation moves the keypoint off the image; invalid
    /// keypoints are excluded from every target and loss.
    #[serde(skip, default = "valid_default")]
    pub valid: bool,
}

impl KeypointAnnotation {
    pub fn new(structure: Structure, position: Point, label: Label) -> Self {
        KeypointAnnotation {
            structure,
            position,
            label,
            valid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamAnnotation {
    #[serde(default)]
    pub exam_id: String,
    pub keypoints: Vec<KeypointAnnotation>,
}

impl ExamAnnotation {
    /// Checks count, uniqueness, anatomical ordering and (when a slice shape
    /// is given) bounds.
    pub fn validate(&self, bounds: Option<(usize, usize)>) -> Result<()> {
        if self.keypoints.len() != 10 {
            return Err(Error::BadAnnotationCount(self.keypoints.len()));
        }
        let mut seen = [false; 10];
        for kp in &self.keypoints {
            let idx = kp.structure as usize;
            if seen[idx] {
                return Err(Error::DuplicateStructure(kp.structure));
            }
            seen[idx] = true;
            if let Some((height, width)) = bounds {
                let Point { row, col } = kp.position;
                let inside = row.is_finite()
                    && col.is_finite()
                    && (0.0..=(height - 1) as f64).contains(&row)
                    && (0.0..=(width - 1) as f64).contains(&col);
                if !inside {
                    return Err(Error::OutOfBounds {
                        structure: kp.structure,
                        row,
                        col,
                        height,
                        width,
                    });
                }
            }
        }
        for branch in Branch::ALL {
            let rows: Vec<f64> = (0..5)
                .map(|level| self.get(Structure::of(branch, level)).unwrap().position.row)
                .collect();
            if rows.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::BadOrdering(branch));
            }
        }
        Ok(())
    }

    pub fn get(&self, structure: Structure) -> Option<&KeypointAnnotation> {
        self.keypoints.iter().find(|k| k.structure == structure)
    }

    /// Keypoints of one branch, in the stored order.
    pub fn branch(&self, branch: Branch) -> impl Iterator<Item = &KeypointAnnotation> {
        self.keypoints
            .iter()
            .filter(move |k| k.structure.branch() == branch)
    }
}

/// A multi-slice sagittal T2 stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamRecord {
    pub exam_id: String,
    /// `n_total x H x W` intensities in `[0, 1]`.
    pub slices: Array3<f32>,
    /// Millimeters per pixel, (row, col).
    pub pixel_spacing: [f64; 2],
    pub slice_interval: f64,
    pub middle_index: usize,
}

impl ExamRecord {
    pub fn validate(&self) -> Result<()> {
        let (n, h, w) = self.slices.dim();
        if n < MIN_SLICES {
            return Err(Error::InvalidExam(format!(
                "{n} slices, at least {MIN_SLICES} required"
            )));
        }
        if self.middle_index >= n {
            return Err(Error::InvalidExam(format!(
                "middle_index {} out of range for {n} slices",
                self.middle_index
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidExam("empty slices".into()));
        }
        for s in self.pixel_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidSpacing(s));
            }
        }
        if !(self.slice_interval > 0.0 && self.slice_interval.is_finite()) {
            return Err(Error::InvalidExam(format!(
                "slice_interval must be positive, got {}",
                self.slice_interval
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.slices.dim().1
    }

    pub fn width(&self) -> usize {
        self.slices.dim().2
    }
}
