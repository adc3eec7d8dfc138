//! Dataset preparation: slice selection, spacing alignment onto the canvas,
//! intensity normalization, splitting, and augmented training samples.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spine_core::encoding::{encode_exam_targets, EncodingSpec, TargetMaps};
use spine_core::ingest::{
    align_spacing_and_resize, augment_with, list_exam_dirs, load_exam, normalize_intensity, select_middle_slices,
    split_dataset, GeometryTransform,
};
use spine_core::{ExamAnnotation, ExamRecord};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};

/// An exam ready for the network: `n_slices x canvas x canvas`, normalized,
/// with its annotation in canvas coordinates.
#[derive(Debug, Clone)]
pub struct PreparedExam {
    pub exam_id: String,
    pub stack: Array3<f32>,
    pub annotation: ExamAnnotation,
    /// Original pixel coordinates to canvas coordinates.
    pub transform: GeometryTransform,
    /// mm per canvas pixel.
    pub spacing: f64,
}

pub fn prepare_exam(exam: &ExamRecord, annotation: &ExamAnnotation, config: &RunConfig) -> Result<PreparedExam> {
    let n = config.n_slices;
    let selected = ExamRecord {
        slices: select_middle_slices(exam, n)?,
        middle_index: n / 2,
        ..exam.clone()
    };
    let (aligned, annotation, transform) =
        align_spacing_and_resize(&selected, annotation, config.spacing, config.canvas)?;
    let mut stack = aligned.slices;
    normalize_intensity(&mut stack);
    Ok(PreparedExam {
        exam_id: exam.exam_id.clone(),
        stack,
        annotation,
        transform,
        spacing: config.spacing,
    })
}

pub fn load_prepared(dir: &Path, config: &RunConfig) -> Result<PreparedExam> {
    let (exam, annotation) = load_exam(dir)?;
    prepare_exam(&exam, &annotation, config)
}

/// Every `exam_*` directory under `root`, sorted by name.
pub fn exam_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let dirs = list_exam_dirs(root)?;
    if dirs.is_empty() {
        return Err(PipelineError::EmptyDataset(root.to_owned()));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path, config: &RunConfig) -> Result<Vec<PreparedExam>> {
    exam_dirs(root)?.iter().map(|d| load_prepared(d, config)).collect()
}

/// Seeded `(train, validation)` split of a prepared dataset.
pub fn split_validation(exams: Vec<PreparedExam>, config: &RunConfig) -> Result<(Vec<PreparedExam>, Vec<PreparedExam>)> {
    let ids: Vec<usize> = (0..exams.len()).collect();
    let (train, val) = split_dataset(&ids, 1.0 - config.validation_fraction, config.seed)?;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| exams[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(&train), pick(&val)))
}

/// Input crops and per-branch targets of one training batch.
pub struct Batch {
    pub input: Array4<f32>,
    pub targets: Vec<(TargetMaps, TargetMaps)>,
}

/// Augmentation seed of exam `index` in `epoch`; independent of batch
/// composition and order.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Augments and encodes the exams `indices` of `exams` for `epoch`.
pub fn make_batch(exams: &[PreparedExam], indices: &[usize], epoch: usize, config: &RunConfig) -> Result<Batch> {
    let crop = config.crop;
    let mut input = Array4::<f32>::zeros((indices.len(), config.n_slices, crop, crop));
    let mut targets = Vec::with_capacity(indices.len());
    let encoding = EncodingSpec::new(config.radius_px, (crop, crop));
    for (b, &i) in indices.iter().enumerate() {
        let exam = &exams[i];
        let spec = config.augmentation_spec(sample_seed(config.seed, epoch, i));
        let size = (exam.stack.dim().1, exam.stack.dim().2);
        spec.validate(size)?;
        let params = spec.sample(size, &mut ChaCha8Rng::seed_from_u64(spec.rng_seed));
        let (stack, annotation) = augment_with(&exam.stack, &exam.annotation, &params, crop);
        input.slice_mut(s![b, .., .., ..]).assign(&stack);
        targets.push(encode_exam_targets(&annotation, &encoding)?);
    }
    Ok(Batch { input, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use spine_core::ingest::{generate_phantom_exam, PhantomSpec};

    fn phantom(count: usize) -> PhantomSpec {
        PhantomSpec {
            count,
            image_size: 160,
            pixel_spacing: 1.3125,
            rng_seed: 11,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn desk_phantoms_need_no_resampling() {
        let config = RunConfig::desk();
        let (exam, ann) = generate_phantom_exam(&phantom(1), 0).unwrap();
        let p = prepare_exam(&exam, &ann, &config).unwrap();
        assert!(p.transform.is_identity());
        assert_eq!(p.stack.dim(), (7, 160, 160));
        assert_eq!(p.annotation, ann);
        let mean = p.stack.mean().unwrap();
        let var = p.stack.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn paper_canvas_alignment_is_invertible() {
        let config = RunConfig::paper();
        let spec = PhantomSpec {
            image_size: 512,
            pixel_spacing: 0.5,
            ..phantom(1)
        };
        let (exam, ann) = generate_phantom_exam(&spec, 0).unwrap();
        let p = prepare_exam(&exam, &ann, &config).unwrap();
        assert_eq!(p.stack.dim(), (7, 640, 640));
        for (a, b) in ann.keypoints.iter().zip(&p.annotation.keypoints) {
            let back = p.transform.inverse(b.position);
            assert!((back.row - a.position.row).abs() < 1e-9 && (back.col - a.position.col).abs() < 1e-9);
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let config = RunConfig::desk();
        let exams: Vec<_> = (0..3)
            .map(|i| {
                let (e, a) = generate_phantom_exam(&phantom(3), i).unwrap();
                prepare_exam(&e, &a, &config).unwrap()
            })
            .collect();
        let a = make_batch(&exams, &[2, 0], 4, &config).unwrap();
        let b = make_batch(&exams, &[2, 0], 4, &config).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.input.dim(), (2, 7, 128, 128));
        assert_eq!(a.targets[0].0.heatmap.values, b.targets[0].0.heatmap.values);
        // The augmentation of an exam does not depend on its batch slot.
        let c = make_batch(&exams, &[0, 2], 4, &config).unwrap();
        assert_eq!(c.input.slice(s![1, .., .., ..]), a.input.slice(s![0, .., .., ..]));
        let d = make_batch(&exams, &[2, 0], 5, &config).unwrap();
        assert_ne!(a.input, d.input);
    }

    #[test]
    fn validation_split_is_seeded_and_disjoint() {
        let config = RunConfig::desk();
        let exams: Vec<_> = (0..10)
            .map(|i| {
                let (e, a) = generate_phantom_exam(&phantom(10), i).unwrap();
                prepare_exam(&e, &a, &config).unwrap()
            })
            .collect();
        let (train, val) = split_validation(exams.clone(), &config).unwrap();
        assert_eq!((train.len(), val.len()), (9, 1));
        let (train2, _) = split_validation(exams, &config).unwrap();
        let ids = |v: &[PreparedExam]| v.iter().map(|e| e.exam_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        assert!(!ids(&train).contains(&val[0].exam_id));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), &RunConfig::desk()),
            Err(PipelineError::EmptyDataset(_))
        ));
    }
}
