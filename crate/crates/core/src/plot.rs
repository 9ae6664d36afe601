//! SVG figures: accuracy per session, uncertainty and bias per epoch,
//! confusion heatmaps and memory sweeps.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, TableRow};

const SIZE: (u32, u32) = (720, 480);

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: format!("plot failed: {e}"),
    }
}

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    /// Points `(i + offset, v_i)`.
    pub fn indexed(label: impl Into<String>, values: &[f64], offset: f64) -> Self {
        Self {
            label: label.into(),
            points: values
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as f64 + offset, v))
                .collect(),
        }
    }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    ((x0, x1), (y0 - pad, y1 + pad))
}

/// Line chart of several series.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Accuracy of each row against the session index.
pub fn accuracy_per_session(path: &Path, rows: &[TableRow]) -> Result<()> {
    let series: Vec<Series> = rows
        .iter()
        .map(|r| Series::indexed(r.label.clone(), &r.accuracies, 0.0))
        .collect();
    line_chart(path, "Accuracy per session", "session", "accuracy (%)", &series)
}

/// Model uncertainty per epoch, one series per session.
pub fn uncertainty_per_epoch(path: &Path, per_session: &[Vec<f64>]) -> Result<()> {
    let series: Vec<Series> = per_session
        .iter()
        .enumerate()
        .map(|(t, u)| Series::indexed(format!("session {t}"), u, 1.0))
        .collect();
    line_chart(path, "Model uncertainty", "epoch", "mean entropy (nats)", &series)
}

/// Share of new-class test samples predicted as base classes, per epoch.
pub fn bias_per_epoch(path: &Path, series: &[Series]) -> Result<()> {
    line_chart(path, "New classes predicted as base", "epoch", "fraction", series)
}

/// Final and average accuracy against memory size.
pub fn memory_sweep(path: &Path, points: &[(usize, f64, f64)]) -> Result<()> {
    let last = Series {
        label: "final".into(),
        points: points.iter().map(|&(m, f, _)| (m as f64, f)).collect(),
    };
    let avg = Series {
        label: "average".into(),
        points: points.iter().map(|&(m, _, a)| (m as f64, a)).collect(),
    };
    line_chart(path, "Accuracy against memory size", "memory size", "accuracy (%)", &[last, avg])
}

/// Row-normalised confusion heatmap.
pub fn confusion_heatmap(path: &Path, title: &str, matrix: &ConfusionMatrix) -> Result<()> {
    let n = matrix.counts.len().max(1);
    let norm = matrix.normalized();
    let root = SVGBackend::new(path, (560, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(36)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("predicted")
        .y_desc("true")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let cells = norm.iter().enumerate().flat_map(|(i, row)| {
        row.iter().enumerate().map(move |(j, &v)| {
            let shade = (255.0 * (1.0 - v)).round() as u8;
            Rectangle::new(
                [(j, n - 1 - i), (j + 1, n - i)],
                RGBColor(shade, shade, 255).filled(),
            )
        })
    });
    chart.draw_series(cells).map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
