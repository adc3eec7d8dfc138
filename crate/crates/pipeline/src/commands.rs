//! The five CLI operations as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use spine_core::decode::DetectedKeypoint;
use spine_core::ingest::{generate_phantom_exam, load_exam, load_exam_record, save_exam, PhantomSpec};
use spine_core::metrics::MetricsReport;
use spine_core::{ExamAnnotation, Label, Point};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, prepare_exam, split_validation};
use crate::error::{PipelineError, Result};
use crate::evaluate::{detect, evaluate};
use crate::plot::{plot_pck_curves, plot_training};
use crate::train::{train, LogRecord, TrainOptions, TrainOutcome, CONFIG};
use crate::{read_json, write_json};

/// Writes `spec.count` phantom exams as `out_dir/exam_<id>`.
pub fn cmd_phantom(spec: &PhantomSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    (0..spec.count)
        .map(|i| {
            let (exam, annotation) = generate_phantom_exam(spec, i)?;
            let dir = out_dir.join(format!("exam_{}", exam.exam_id));
            save_exam(&dir, &exam, &annotation)?;
            Ok(dir)
        })
        .collect()
}

/// Loads `config.train_dir`, holds out a validation split and trains.
pub fn cmd_train(config: &RunConfig, options: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let exams = load_dataset(&config.train_dir, config)?;
    let (train_set, val_set) = split_validation(exams, config)?;
    train(config, &train_set, &val_set, options)
}

/// The run configuration stored next to a checkpoint.
pub fn run_config_of(checkpoint: &Path) -> Result<RunConfig> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    RunConfig::resolve(Some(&dir.join(CONFIG)), None, std::iter::empty())
}

/// Evaluates `checkpoint` on every exam under `data_dir` and writes
/// `report.json` and `report.csv` into `out_dir`, plus `pck_curve.csv` when
/// more than one threshold is given. A single threshold replaces the
/// configured one.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    config: Option<&RunConfig>,
    thresholds_mm: Option<&[f64]>,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let config = match config {
        Some(c) => c.clone(),
        None => run_config_of(checkpoint)?,
    };
    let (mut net, _) = load_checkpoint(checkpoint, Some(&config))?;
    let thresholds = thresholds_mm.unwrap_or(&config.eval.curve_thresholds_mm);
    let (main, curve): (f64, &[f64]) = match thresholds {
        [single] => (*single, &[]),
        many => (config.eval.threshold_mm, many),
    };
    let exams = load_dataset(data_dir, &config)?;
    let report = evaluate(&mut net, &exams, &config, main, curve)?;
    write_report(&report, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_json(&out_dir.join("report.json"), report)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in report.csv_rows() {
        csv.push_str(&format!("{k},{v}\n"));
    }
    let path = out_dir.join("report.csv");
    std::fs::write(&path, csv).map_err(|e| PipelineError::io(&path, e))?;
    if !report.pck_curve.is_empty() {
        let mut curve = String::from("threshold_mm,disc,vertebra,overall\n");
        for p in &report.pck_curve {
            curve.push_str(&format!("{},{},{},{}\n", p.threshold_mm, p.disc, p.vertebra, p.overall));
        }
        let path = out_dir.join("pck_curve.csv");
        std::fs::write(&path, curve).map_err(|e| PipelineError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub exam_id: String,
    /// Wall time of preprocessing, forward pass and decoding.
    pub latency_s: f64,
    /// Positions in the original pixel grid of the exam.
    pub detections: Vec<DetectedKeypoint>,
}

/// Detects the ten keypoints of one exam directory. Writes
/// `detections.json` and an `overlay.png` of the middle slice into
/// `out_dir`; ground truth is drawn too when the exam is annotated.
pub fn cmd_infer(checkpoint: &Path, exam_dir: &Path, out_dir: &Path, config: Option<&RunConfig>) -> Result<InferenceResult> {
    let config = match config {
        Some(c) => c.clone(),
        None => run_config_of(checkpoint)?,
    };
    let (mut net, _) = load_checkpoint(checkpoint, Some(&config))?;
    let exam = load_exam_record(exam_dir)?;
    let truth = exam_dir
        .join("annotation.json")
        .is_file()
        .then(|| load_exam(exam_dir).map(|(_, a)| a))
        .transpose()?;

    let started = Instant::now();
    // Geometry and normalization do not look at the annotation.
    let placeholder = ExamAnnotation {
        exam_id: exam.exam_id.clone(),
        keypoints: Vec::new(),
    };
    let prepared = prepare_exam(&exam, &placeholder, &config)?;
    let mut detections = detect(&mut net, &prepared, &config)?;
    for d in &mut detections {
        d.position = prepared.transform.inverse(d.position);
    }
    let latency_s = started.elapsed().as_secs_f64();

    let result = InferenceResult {
        exam_id: exam.exam_id.clone(),
        latency_s,
        detections,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_json(&out_dir.join("detections.json"), &result)?;
    let middle = exam.slices.index_axis(ndarray::Axis(0), exam.middle_index);
    let overlay = render_overlay(middle, &result.detections, truth.as_ref());
    let path = out_dir.join("overlay.png");
    overlay
        .save(&path)
        .map_err(|e| PipelineError::Plot(format!("{}: {e}", path.display())))?;
    eprintln!(
        "{}",
        serde_json::json!({"kind": "inference", "exam_id": result.exam_id, "latency_s": latency_s})
    );
    Ok(result)
}

const DETECTION: Rgb<u8> = Rgb([230, 40, 40]);
const DEGENERATIVE: Rgb<u8> = Rgb([255, 170, 0]);
const TRUTH: Rgb<u8> = Rgb([40, 210, 60]);

fn put(img: &mut RgbImage, row: i64, col: i64, color: Rgb<u8>) {
    if row >= 0 && col >= 0 && (row as u32) < img.height() && (col as u32) < img.width() {
        img.put_pixel(col as u32, row as u32, color);
    }
}

fn cross(img: &mut RgbImage, p: Point, arm: i64, color: Rgb<u8>) {
    let (r, c) = (p.row.round() as i64, p.col.round() as i64);
    for d in -arm..=arm {
        put(img, r + d, c, color);
        put(img, r, c + d, color);
    }
}

fn diamond(img: &mut RgbImage, p: Point, radius: i64, color: Rgb<u8>) {
    let (r, c) = (p.row.round() as i64, p.col.round() as i64);
    for d in 0..=radius {
        for (dr, dc) in [(d, radius - d), (-d, radius - d), (d, d - radius), (-d, d - radius)] {
            put(img, r + dr, c + dc, color);
        }
    }
}

/// Grayscale slice with detections as red (normal) or orange
/// (degenerative) crosses and ground truth as green diamonds.
pub fn render_overlay(
    slice: ndarray::ArrayView2<f32>,
    detections: &[DetectedKeypoint],
    truth: Option<&ExamAnnotation>,
) -> RgbImage {
    let (h, w) = slice.dim();
    let lo = slice.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = ((slice[[y as usize, x as usize]] - lo) / span * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let arm = (h.max(w) / 80).max(2) as i64;
    if let Some(truth) = truth {
        for kp in &truth.keypoints {
            diamond(&mut img, kp.position, arm + 1, TRUTH);
        }
    }
    for d in detections {
        let color = match d.label {
            Label::Normal => DETECTION,
            Label::Degenerative => DEGENERATIVE,
        };
        cross(&mut img, d.position, arm, color);
    }
    img
}

/// Renders one PCK figure from one or more report files, or a training
/// figure from a training log.
pub fn cmd_plot(reports: &[PathBuf], log: Option<&Path>, out: &Path, font: Option<&Path>) -> Result<()> {
    if let Some(log) = log {
        let text = std::fs::read_to_string(log).map_err(|e| PipelineError::io(log, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<LogRecord>(l).map_err(|source| PipelineError::Json {
                    path: log.to_owned(),
                    source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return plot_training(&records, out, font);
    }
    let loaded = reports
        .iter()
        .map(|p| {
            let report: MetricsReport = read_json(p)?;
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .or(p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((label, p.clone(), report))
        })
        .collect::<Result<Vec<_>>>()?;
    plot_pck_curves(&loaded, out, font)
}
