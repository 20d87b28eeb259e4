//! Self-contained SVG line and scatter plots.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    /// Markers with optional vertical error bars.
    Points,
    Line,
}

pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    /// One-sigma half-widths, drawn as vertical bars.
    pub err: Option<&'a [f64]>,
    pub style: Style,
    pub color: RGBColor,
}

pub const DATA_COLOR: RGBColor = RGBColor(31, 119, 180);
pub const MODEL_COLOR: RGBColor = RGBColor(214, 39, 40);
pub const AUX_COLOR: RGBColor = RGBColor(127, 127, 127);

fn finite_points<'a>(s: &'a Series<'a>) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
    s.x.iter()
        .zip(s.y)
        .enumerate()
        .filter(|(_, (x, y))| x.is_finite() && y.is_finite())
        .map(|(i, (&x, &y))| (i, x, y))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Draws `series` on shared axes into an SVG file.
pub fn plot(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series<'_>]) -> CliResult<()> {
    let draw = || -> Result<(), Box<dyn std::error::Error>> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in series {
            for (i, x, y) in finite_points(s) {
                let e = s.err.map_or(0.0, |e| e[i]).max(0.0);
                let e = if e.is_finite() { e } else { 0.0 };
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y - e);
                y1 = y1.max(y + e);
            }
        }
        let (x0, x1) = padded(x0, x1);
        let (y0, y1) = padded(y0, y1);

        let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(45)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
        for s in series {
            let color = s.color;
            match s.style {
                Style::Line => {
                    chart
                        .draw_series(LineSeries::new(finite_points(s).map(|(_, x, y)| (x, y)), color.stroke_width(2)))?
                        .label(s.label)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
                }
                Style::Points => {
                    if let Some(err) = s.err {
                        chart.draw_series(finite_points(s).filter(|(i, ..)| err[*i].is_finite()).map(|(i, x, y)| {
                            PathElement::new(vec![(x, y - err[i]), (x, y + err[i])], color.mix(0.4))
                        }))?;
                    }
                    chart
                        .draw_series(finite_points(s).map(|(_, x, y)| Circle::new((x, y), 2, color.filled())))?
                        .label(s.label)
                        .legend(move |(x, y)| Circle::new((x + 10, y), 3, color.filled()));
                }
            }
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| CliError::io(path, e))
}
