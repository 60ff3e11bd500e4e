//! Static SVG line plots for metrics, sweeps and EM traces.

use std::path::Path;

use plotters::prelude::*;

use crate::em::EmTrace;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, SweepRow};
use crate::trainer::MetricsRow;

pub type Series = (String, Vec<(f64, f64)>);

const PALETTE: [RGBColor; 5] = [BLUE, RED, GREEN, MAGENTA, BLACK];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Draws each series as a line with point markers.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Plot(format!("{title}: nothing to plot")));
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi + 0.02 * (hi - lo)) };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0 - 0.02 * (y1 - y0), y1));

    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        if pts.len() <= 60 {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Sampled threshold against training step.
pub fn threshold_trajectory(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.sampled_t.map(|t| (r.step as f64, t))).collect();
    if pts.is_empty() {
        return Err(Error::Plot("no sampled_T values in metrics".into()));
    }
    line_plot(path, "Sampled threshold", "step", "T", &[("sampled_T".into(), pts)])
}

pub fn loss_curves(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    let mut series: Vec<Series> = vec![
        ("total".into(), col(|r| r.loss_total)),
        ("supervised".into(), col(|r| r.loss_sup)),
    ];
    if rows.iter().any(|r| r.loss_unsup != 0.0) {
        series.push(("unsupervised".into(), col(|r| r.loss_unsup)));
    }
    if rows.iter().any(|r| r.loss_kl != 0.0) {
        series.push(("kl".into(), col(|r| r.loss_kl)));
    }
    line_plot(path, "Training losses", "step", "loss", &series)
}

pub fn validation_curve(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.val_iou.map(|v| (r.step as f64, v))).collect();
    line_plot(path, "Validation IoU", "step", "IoU", &[("val_iou".into(), pts)])
}

fn sweep_series(table: &[SweepRow]) -> Vec<(f64, f64)> {
    table.iter().map(|r| (r.key, r.mean_iou)).collect()
}

/// Writes `gamma_sweep.svg` and `epsilon_sweep.svg` into `dir`.
pub fn sweep_plots(dir: &Path, report: &EvalReport) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for (file, title, x, table) in [
        ("gamma_sweep.svg", "IoU under intensity shift", "gamma", &report.gamma_table),
        ("epsilon_sweep.svg", "IoU under FGSM", "epsilon", &report.epsilon_table),
    ] {
        if table.is_empty() {
            continue;
        }
        let p = dir.join(file);
        line_plot(&p, title, x, "mean IoU", &[("IoU".into(), sweep_series(table))])?;
        out.push(p);
    }
    Ok(out)
}

pub fn em_convergence(path: &Path, trace: &EmTrace) -> Result<()> {
    let ll = trace
        .iterations
        .iter()
        .map(|it| (it.iteration as f64, it.log_likelihood))
        .collect();
    let fe = trace
        .iterations
        .iter()
        .map(|it| (it.iteration as f64, it.free_energy))
        .collect();
    line_plot(
        path,
        "EM convergence",
        "iteration",
        "value",
        &[("log-likelihood".into(), ll), ("free energy".into(), fe)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a.svg");
        line_plot(&p, "t", "x", "y", &[("s".into(), vec![(0.0, 1.0), (1.0, 2.0)]), ("c".into(), vec![(0.0, 3.0)])]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(line_plot(&p, "t", "x", "y", &[("s".into(), vec![])]).is_err());
    }
}
