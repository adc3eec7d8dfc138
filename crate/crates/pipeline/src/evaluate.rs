use ndarray::{s, Array4};
use spine_core::decode::{decode_outputs, DetectedKeypoint};
use spine_core::metrics::{ExamDetections, MetricsReport};
use spine_core::ModelOutputs;
use spine_net::{SampleOutputs, SpineNet};

use crate::config::RunConfig;
use crate::data::PreparedExam;
use crate::error::Result;

fn model_outputs(s: SampleOutputs) -> ModelOutputs {
    ModelOutputs {
        disc_heatmap: s.disc_heatmap,
        disc_offset: s.disc_offset,
        vert_heatmap: s.vert_heatmap,
        vert_offset: s.vert_offset,
    }
}

/// Evaluation-mode forward pass on the full canvas.
pub fn predict(net: &mut SpineNet, exam: &PreparedExam) -> Result<ModelOutputs> {
    let (c, h, w) = exam.stack.dim();
    let mut x = Array4::<f32>::zeros((1, c, h, w));
    x.slice_mut(s![0, .., .., ..]).assign(&exam.stack);
    let out = net.predict(&x)?.pop().expect("one sample");
    Ok(model_outputs(out))
}

/// Top-k detections per branch in canvas coordinates.
pub fn detect(net: &mut SpineNet, exam: &PreparedExam, config: &RunConfig) -> Result<Vec<DetectedKeypoint>> {
    let outputs = predict(net, exam)?;
    Ok(decode_outputs(
        &outputs,
        config.radius_px,
        config.eval.top_k,
        config.eval.suppression_px,
    )?)
}

pub fn detect_all(net: &mut SpineNet, exams: &[PreparedExam], config: &RunConfig) -> Result<Vec<ExamDetections>> {
    exams
        .iter()
        .map(|exam| {
            Ok(ExamDetections {
                exam_id: exam.exam_id.clone(),
                detections: detect(net, exam, config)?,
                ground_truth: exam.annotation.clone(),
                spacing: exam.spacing,
            })
        })
        .collect()
}

pub fn evaluate(
    net: &mut SpineNet,
    exams: &[PreparedExam],
    config: &RunConfig,
    threshold_mm: f64,
    curve_thresholds_mm: &[f64],
) -> Result<MetricsReport> {
    let detections = detect_all(net, exams, config)?;
    Ok(MetricsReport::from_exams(&detections, threshold_mm, curve_thresholds_mm))
}
