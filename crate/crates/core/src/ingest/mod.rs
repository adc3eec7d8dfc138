//! Exam ingestion: the on-disk exam layout, geometry normalization,
//! training augmentation, dataset splitting and the synthetic phantom
//! generator used for desk-scale verification.

mod augment;
mod geometry;
mod io;
pub mod phantom;
mod split;

pub use augment::{apply_augmentation, augment_with, AugmentParams, AugmentationSpec};
pub use geometry::{
    align_spacing_and_resize, normalize_intensity, sample_bilinear, select_middle_slices,
    warp_stack, GeometryTransform,
};
pub use io::{list_exam_dirs, load_exam, load_exam_record, save_exam, ExamMeta};
pub use phantom::{generate_phantom_exam, phantom_annotation, PhantomSpec};
pub use split::split_dataset;

#[cfg(test)]
pub(crate) use geometry::argmax2;
