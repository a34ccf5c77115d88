//! BLER-versus-SNR figures.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::ResultRow;

/// One labeled curve.
pub struct Series {
    pub label: String,
    pub rows: Vec<ResultRow>,
}

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Draws every series as a BLER curve on a log-scale y axis into an SVG file.
/// Points with zero errors cannot sit on a log axis and are left out.
pub fn plot_bler(series: &[Series], out: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.rows.is_empty()) {
        let empty: Vec<&str> = series.iter().filter(|s| s.rows.is_empty()).map(|s| s.label.as_str()).collect();
        return Err(Error::InvalidArgument(if series.is_empty() {
            "nothing to plot".into()
        } else {
            format!("no result rows in {}", empty.join(", "))
        }));
    }
    let all = series.iter().flat_map(|s| s.rows.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in all {
        x0 = x0.min(r.snr_ff_db);
        x1 = x1.max(r.snr_ff_db);
        if r.bler > 0.0 {
            y0 = y0.min(r.bler);
            y1 = y1.max(r.bler);
        }
    }
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if !y0.is_finite() {
        (y0, y1) = (1e-6, 1.0);
    }
    let y0 = 10f64.powf(y0.log10().floor());
    let y1 = 10f64.powf(y1.log10().ceil()).max(y0 * 10.0).min(1.0);

    let err = draw_err(out);
    let root = SVGBackend::new(out, (800, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, (y0..y1).log_scale())
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("forward SNR (dB)")
        .y_desc("BLER")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(&err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut pts: Vec<(f64, f64)> = s.rows.iter().filter(|r| r.bler > 0.0).map(|r| (r.snr_ff_db, r.bler)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(&err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(&err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}
