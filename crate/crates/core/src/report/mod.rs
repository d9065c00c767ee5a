//! Markdown and CSV summaries of evaluation reports, and PNG plots of learning
//! curves and probe histograms.

mod raster;

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::Result;
use crate::harness::{EvalReport, ProbeReport};
use crate::sr::PretextReport;
use raster::{plot_error, Canvas};

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn axes_text(r: &EvalReport) -> String {
    r.axes.iter().filter(|(k, _)| k.as_str() != "table").map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
}

/// One markdown table row per report.
pub fn reports_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "| experiment | setting | pipeline | POG (deg) | best-test POG | final POG | folds | full-scale reference |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        s.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {}/{}{} | {} |\n",
            r.experiment_id,
            axes_text(r),
            r.description,
            r.mean_pog,
            r.mean_pog_best_test,
            r.mean_pog_final,
            r.folds.len(),
            r.total_folds,
            if r.complete { "" } else { " (partial)" },
            fmt_opt(r.reference_pog),
        ));
    }
    s
}

/// One CSV row per report.
pub fn reports_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "experiment_id",
        "axes",
        "description",
        "mean_pog",
        "mean_pog_best_test",
        "mean_pog_final",
        "folds",
        "complete",
        "reference_pog",
    ])
    .map_err(std::io::Error::from)?;
    for r in reports {
        w.write_record([
            r.experiment_id.clone(),
            axes_text(r),
            r.description.clone(),
            r.mean_pog.to_string(),
            r.mean_pog_best_test.to_string(),
            r.mean_pog_final.to_string(),
            r.folds.len().to_string(),
            r.complete.to_string(),
            r.reference_pog.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(std::io::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Fold-averaged test error per epoch.
pub fn mean_curve(r: &EvalReport) -> Vec<(usize, f64)> {
    let epochs = r.folds.iter().map(|f| f.curve.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let m = r.folds.iter().map(|f| f.curve[e].test_pog).sum::<f64>() / r.folds.len() as f64;
            (r.folds[0].curve[e].epoch, m)
        })
        .collect()
}

fn save_canvas(canvas: Canvas, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    canvas.into_image()?.save_png(path)
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    ((lo - pad).max(0.0), hi + pad)
}

/// Test POG against epoch, one fold-averaged line per report.
pub fn plot_learning_curves(reports: &[EvalReport], path: &Path) -> Result<()> {
    let curves: Vec<(String, Vec<(usize, f64)>)> = reports.iter().map(|r| (r.experiment_id.clone(), mean_curve(r))).collect();
    let max_epoch = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).max().unwrap_or(1).max(1);
    let (lo, hi) = y_range(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)));
    let mut canvas = Canvas::new(900, 560);
    {
        let root = canvas.backend().into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Test POG by epoch (mean over folds)", ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(0usize..max_epoch, lo..hi)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc("epoch").y_desc("POG (deg)").draw().map_err(plot_error)?;
        for (i, (name, c)) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(c.iter().copied(), color.stroke_width(2)))
                .map_err(plot_error)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        if !curves.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()
                .map_err(plot_error)?;
        }
        root.present().map_err(plot_error)?;
    }
    save_canvas(canvas, path)
}

/// Probe-batch loss against step for a pretext run.
pub fn plot_pretext_curve(report: &PretextReport, path: &Path) -> Result<()> {
    let max_step = report.curve.iter().map(|p| p.0).max().unwrap_or(1).max(1);
    let (lo, hi) = y_range(report.curve.iter().map(|p| p.1));
    let mut canvas = Canvas::new(800, 480);
    {
        let root = canvas.backend().into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("SR pretext: probe-batch L1", ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(64)
            .build_cartesian_2d(0usize..max_step, lo..hi)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc("step").y_desc("L1").draw().map_err(plot_error)?;
        chart
            .draw_series(LineSeries::new(report.curve.iter().copied(), PALETTE[0].stroke_width(2)))
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    save_canvas(canvas, path)
}

/// Histogram of per-sample prediction shifts.
pub fn plot_probe_histogram(report: &ProbeReport, path: &Path) -> Result<()> {
    let max_count = report.histogram.iter().map(|b| b.count).max().unwrap_or(1).max(1);
    let hi = report.histogram.last().map(|b| b.hi).unwrap_or(1.0);
    let mut canvas = Canvas::new(800, 480);
    {
        let root = canvas.backend().into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(
                format!("Gaze shift after restoration (mean {:.2} deg, centering {:.2})", report.mean_shift_deg, report.centering),
                ("sans-serif", 20),
            )
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..hi, 0usize..max_count + 1)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc("shift (deg)").y_desc("samples").draw().map_err(plot_error)?;
        chart
            .draw_series(
                report
                    .histogram
                    .iter()
                    .map(|b| Rectangle::new([(b.lo, 0), (b.hi, b.count)], PALETTE[0].mix(0.8).filled())),
            )
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    save_canvas(canvas, path)
}

/// Renders every report JSON in `dir` (partial ones included) into
/// `summary.md`, `summary.csv` and `curves.png`, plus `<name>.png` for each
/// probe report. Returns the written paths.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    let mut reports = Vec::new();
    let mut written = Vec::new();
    for p in &entries {
        let text = std::fs::read_to_string(p)?;
        if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
            reports.push(r);
        } else if let Ok(probe) = serde_json::from_str::<ProbeReport>(&text) {
            let out = p.with_extension("png");
            plot_probe_histogram(&probe, &out)?;
            written.push(out);
        } else if let Ok(pretext) = serde_json::from_str::<PretextReport>(&text) {
            let out = p.with_extension("png");
            plot_pretext_curve(&pretext, &out)?;
            written.push(out);
        }
    }
    if !reports.is_empty() {
        let md = dir.join("summary.md");
        std::fs::write(&md, reports_markdown(&reports))?;
        let csv = dir.join("summary.csv");
        std::fs::write(&csv, reports_csv(&reports)?)?;
        let png = dir.join("curves.png");
        plot_learning_curves(&reports, &png)?;
        written.extend([md, csv, png]);
    }
    Ok(written)
}
