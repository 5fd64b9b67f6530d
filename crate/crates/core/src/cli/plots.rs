use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::training::EpochTrace;

pub const LOSS_PLOT: &str = "loss_curve.svg";
pub const ACCURACY_PLOT: &str = "accuracy_curve.svg";
pub const QWK_PLOT: &str = "qwk_curve.svg";

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn plot(path: &Path, title: &str, y_label: &str, series: &[Series<'_>]) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::Other(format!("{}: {e}", path.display()));
    let points = series.iter().flat_map(|s| s.2.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let pad = ((y_max - y_min) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.5f64..x_max + 0.5, (y_min - pad)..(y_max + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for (name, color, pts) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Writes loss and accuracy curves, plus a kappa curve when the trace has one,
/// into `dir`. Returns the written paths.
pub fn emit_curve_plots(trace: &[EpochTrace], dir: &Path) -> Result<Vec<PathBuf>> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("cannot plot an empty trace".into()));
    }
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())));
    }
    let pts = |f: fn(&EpochTrace) -> f64| trace.iter().map(|t| (t.epoch as f64, f(t))).collect::<Vec<_>>();
    let mut written = Vec::new();

    let path = dir.join(LOSS_PLOT);
    plot(
        &path,
        "Training vs validation loss",
        "loss",
        &[
            ("train", BLUE, pts(|t| t.train_loss)),
            ("validation", RED, pts(|t| t.val_loss)),
        ],
    )?;
    written.push(path);

    let path = dir.join(ACCURACY_PLOT);
    plot(
        &path,
        "Training vs validation accuracy",
        "accuracy",
        &[
            ("train", BLUE, pts(|t| t.train_accuracy)),
            ("validation", RED, pts(|t| t.val_accuracy)),
        ],
    )?;
    written.push(path);

    let qwk: Vec<(f64, f64)> = trace
        .iter()
        .filter_map(|t| t.val_qwk.map(|q| (t.epoch as f64, q)))
        .collect();
    if !qwk.is_empty() {
        let path = dir.join(QWK_PLOT);
        plot(
            &path,
            "Validation quadratic weighted kappa",
            "kappa",
            &[("validation", GREEN, qwk)],
        )?;
        written.push(path);
    }
    Ok(written)
}
