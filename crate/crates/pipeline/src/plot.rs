//! PNG figures: PCK-versus-threshold curves and training curves.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::register_font;
use spine_core::metrics::MetricsReport;

use crate::error::{PipelineError, Result};
use crate::train::LogRecord;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();

/// Registers the label font once per process: `font` if given, else the
/// first system font found.
fn ensure_font(font: Option<&Path>) -> Result<()> {
    FONT.get_or_init(|| {
        let path: PathBuf = match font {
            Some(p) => p.to_owned(),
            None => FONT_CANDIDATES
                .iter()
                .map(PathBuf::from)
                .find(|p| p.is_file())
                .ok_or_else(|| "no system font found; pass --font".to_owned())?,
        };
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice()))
            .map_err(|_| format!("{}: not a usable font", path.display()))
    })
    .clone()
    .map_err(PipelineError::Plot)
}

fn plot_err<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Plot(e.to_string())
}

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Overall PCK against the threshold, one line per labelled report.
pub fn plot_pck_curves(reports: &[(String, PathBuf, MetricsReport)], out: &Path, font: Option<&Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(PipelineError::Plot("no reports given".into()));
    }
    for (_, path, r) in reports {
        if r.pck_curve.is_empty() {
            return Err(PipelineError::EmptyReport(path.clone()));
        }
    }
    ensure_font(font)?;
    let x_max = reports
        .iter()
        .flat_map(|(_, _, r)| r.pck_curve.iter().map(|p| p.threshold_mm))
        .fold(0.0f64, f64::max);
    let root = BitMapBackend::new(out, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("PCK curve", ("sans-serif", 26))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..1.02)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("threshold (mm)")
        .y_desc("PCK")
        .draw()
        .map_err(plot_err)?;
    for (i, (label, _, report)) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = report.pck_curve.iter().map(|p| (p.threshold_mm, p.overall)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if reports.len() > 1 {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Mean training loss and validation macro F1 per epoch.
pub fn plot_training(records: &[LogRecord], out: &Path, font: Option<&Path>) -> Result<()> {
    let epochs: Vec<(usize, f64, f64)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch {
                epoch,
                mean_loss,
                validation,
                ..
            } => Some((*epoch, *mean_loss, validation.overall_macro_f1)),
            LogRecord::Step { .. } => None,
        })
        .collect();
    if epochs.is_empty() {
        return Err(PipelineError::Plot("training log has no epoch records".into()));
    }
    ensure_font(font)?;
    let x_max = epochs.iter().map(|e| e.0).max().unwrap_or(0) as f64 + 1.0;
    let y_max = epochs.iter().map(|e| e.1).fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let root = BitMapBackend::new(out, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training", ("sans-serif", 26))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .right_y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(plot_err)?
        .set_secondary_coord(0.0..x_max, 0.0..1.02);
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("mean loss")
        .draw()
        .map_err(plot_err)?;
    chart
        .configure_secondary_axes()
        .y_desc("validation macro F1")
        .draw()
        .map_err(plot_err)?;
    let (c0, c1) = (COLORS[0], COLORS[1]);
    chart
        .draw_series(LineSeries::new(
            epochs.iter().map(|e| (e.0 as f64, e.1)),
            c0.stroke_width(2),
        ))
        .map_err(plot_err)?
        .label("loss")
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c0.stroke_width(2)));
    chart
        .draw_secondary_series(LineSeries::new(
            epochs.iter().map(|e| (e.0 as f64, e.2)),
            c1.stroke_width(2),
        ))
        .map_err(plot_err)?
        .label("validation macro F1")
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c1.stroke_width(2)));
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
