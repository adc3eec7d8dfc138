//! On-disk exam layout:
//!
//! ```text
//! exam_<id>/
//!   slice_000.png ... slice_NNN.png   16-bit grayscale
//!   meta.json                         {pixel_spacing: [r, c], slice_interval, middle_index}
//!   annotation.json                   {keypoints: [{structure, row, col, label}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::anatomy::{ExamAnnotation, ExamRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamMeta {
    pub pixel_spacing: [f64; 2],
    pub slice_interval: f64,
    pub middle_index: usize,
}

#[derive(Deserialize)]
struct RawMeta {
    pixel_spacing: Option<[f64; 2]>,
    slice_interval: Option<f64>,
    middle_index: Option<usize>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn slice_index(name: &str) -> Option<usize> {
    name.strip_prefix("slice_")?.strip_suffix(".png")?.parse().ok()
}

fn exam_id_from_dir(dir: &Path) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_prefix("exam_").unwrap_or(&name).to_owned()
}

/// Reads and validates the images and metadata of an exam directory,
/// without its annotation.
pub fn load_exam_record(dir: &Path) -> Result<ExamRecord> {
    let raw: RawMeta = read_json(&dir.join("meta.json"))?;
    let pixel_spacing = raw.pixel_spacing.ok_or(Error::MissingSpacing)?;
    let slice_interval = raw.slice_interval.ok_or(Error::MissingField("slice_interval"))?;
    let middle_index = raw.middle_index.ok_or(Error::MissingField("middle_index"))?;

    let mut files: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let idx = slice_index(&entry.file_name().to_string_lossy())?;
            Some((idx, entry.path()))
        })
        .collect();
    if files.is_empty() {
        return Err(Error::MissingSlices(dir.to_owned()));
    }
    files.sort();

    let mut dims = None;
    let mut data = Vec::new();
    for (_, path) in &files {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .into_luma16();
        let (w, h) = img.dimensions();
        match dims {
            None => dims = Some((h as usize, w as usize)),
            Some(d) if d != (h as usize, w as usize) => {
                return Err(Error::InvalidExam(format!(
                    "slice {} is {h}x{w}, expected {}x{}",
                    path.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        data.extend(img.into_raw().into_iter().map(|v| v as f32 / 65535.0));
    }
    let (h, w) = dims.expect("at least one slice");
    let slices = Array3::from_shape_vec((files.len(), h, w), data).expect("consistent slice sizes");

    let exam = ExamRecord {
        exam_id: exam_id_from_dir(dir),
        slices,
        pixel_spacing,
        slice_interval,
        middle_index,
    };
    exam.validate()?;
    Ok(exam)
}

/// Reads and validates one exam directory.
pub fn load_exam(dir: &Path) -> Result<(ExamRecord, ExamAnnotation)> {
    let exam = load_exam_record(dir)?;
    let (h, w) = (exam.height(), exam.width());
    let mut annotation: ExamAnnotation = read_json(&dir.join("annotation.json"))?;
    annotation.exam_id = exam.exam_id.clone();
    annotation.validate(Some((h, w)))?;
    Ok((exam, annotation))
}

/// Writes an exam in the layout [`load_exam`] reads. Intensities are
/// clamped to `[0, 1]` and quantized to 16 bits.
pub fn save_exam(dir: &Path, exam: &ExamRecord, annotation: &ExamAnnotation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (_, h, w) = exam.slices.dim();
    for (k, slice) in exam.slices.outer_iter().enumerate() {
        let pixels: Vec<u16> = slice
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer size matches");
        let path = dir.join(format!("slice_{k:03}.png"));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    write_json(
        &dir.join("meta.json"),
        &ExamMeta {
            pixel_spacing: exam.pixel_spacing,
            slice_interval: exam.slice_interval,
            middle_index: exam.middle_index,
        },
    )?;
    write_json(&dir.join("annotation.json"), annotation)
}

/// `exam_*` subdirectories of `root`, sorted by name.
pub fn list_exam_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.file_name().to_string_lossy().starts_with("exam_"))
        .map(|e| e.path())
        .collect();
    dirs.sort();
    Ok(dirs)
}
