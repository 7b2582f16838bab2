//! SVG line charts rebuilt from trajectory CSVs, with a log-scaled x axis
//! showing `step + 1` so that the initialization appears at 10⁰.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

/// Columns of a trajectory CSV, by header name.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{} has no header", path.display())))?
            .split(',')
            .map(String::from)
            .collect();
        let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        Ok(Table { header, rows })
    }

    /// `(step + 1, value)` for rows where the column is present.
    fn series(&self, column: &str) -> Result<Vec<(f64, f64)>> {
        let col = self.header.iter().position(|h| h == column).ok_or_else(|| Error::Format(format!("no column `{column}`")))?;
        let step = self.header.iter().position(|h| h == "step").ok_or_else(|| Error::Format("no column `step`".into()))?;
        let mut out = Vec::new();
        for r in &self.rows {
            let (Some(s), Some(v)) = (r.get(step), r.get(col)) else { continue };
            if v.is_empty() {
                continue;
            }
            let s: f64 = s.parse().map_err(|_| Error::Format(format!("bad step `{s}`")))?;
            let v: f64 = v.parse().map_err(|_| Error::Format(format!("bad value `{v}`")))?;
            out.push((s + 1.0, v));
        }
        Ok(out)
    }
}

fn plot_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Format(format!("plot rendering failed: {e}"))
}

struct Line {
    label: String,
    points: Vec<(f64, f64)>,
    color: RGBColor,
    dashed: bool,
}

fn draw(path: &Path, title: &str, y_desc: &str, lines: &[Line]) -> Result<()> {
    let x_max = lines.iter().flat_map(|l| l.points.iter().map(|p| p.0)).fold(2.0, f64::max);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d((1f64..x_max).log_scale(), 0f64..1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("iteration + 1").y_desc(y_desc).draw().map_err(plot_err)?;
    for l in lines {
        let style = l.color.stroke_width(2);
        let color = l.color;
        if l.dashed {
            chart.draw_series(DashedLineSeries::new(l.points.clone(), 8, 5, style)).map_err(plot_err)?
        } else {
            chart.draw_series(LineSeries::new(l.points.clone(), style)).map_err(plot_err)?
        }
        .label(l.label.clone())
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(94, 60, 153),
    RGBColor(33, 145, 140),
    RGBColor(59, 82, 139),
    RGBColor(230, 159, 0),
    RGBColor(213, 94, 0),
    RGBColor(0, 114, 178),
];

/// Accuracy and attention charts for one trajectory CSV; returns the paths.
pub fn plot_trajectory(csv: &Path, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let t = Table::read(csv)?;
    let acc = dir.join(format!("accuracy_{stem}.svg"));
    draw(
        &acc,
        "Train and test accuracy",
        "accuracy",
        &[
            Line { label: "train".into(), points: t.series("train_acc")?, color: PALETTE[0], dashed: false },
            Line { label: "test".into(), points: t.series("test_acc")?, color: PALETTE[1], dashed: true },
        ],
    )?;
    let attn = dir.join(format!("attention_{stem}.svg"));
    draw(
        &attn,
        "Softmax probability of the signal token",
        "mean signal attention",
        &[
            Line { label: "clean".into(), points: t.series("mean_sig_attn_clean")?, color: PALETTE[0], dashed: false },
            Line { label: "noisy".into(), points: t.series("mean_sig_attn_noisy")?, color: PALETTE[3], dashed: false },
        ],
    )?;
    Ok(vec![acc, attn])
}

/// Train (solid) and test (dashed) accuracy of each swept value.
pub fn plot_sweep(runs: &[(f64, PathBuf)], label: &str, out: &Path) -> Result<()> {
    let mut lines = Vec::new();
    for (k, (value, csv)) in runs.iter().enumerate() {
        let t = Table::read(csv)?;
        let color = PALETTE[k % PALETTE.len()];
        lines.push(Line { label: format!("{label}={value} train"), points: t.series("train_acc")?, color, dashed: false });
        lines.push(Line { label: format!("{label}={value} test"), points: t.series("test_acc")?, color, dashed: true });
    }
    draw(out, &format!("Accuracy by {label}"), "accuracy", &lines)
}
