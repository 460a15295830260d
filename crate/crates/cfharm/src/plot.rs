//! SVG figures for training curves and harm/violation CDFs. The CSV and
//! curve text files are the data of record; these are a convenience.

use std::path::{Path, PathBuf};

use cfharm_core::eval::Cdf;
use plotters::prelude::*;

use crate::artifacts::*;
use crate::error::{CliError, CliResult};

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(format!("plotting failed: {e}"))
}

/// Trailing mean over up to `window` defined points.
fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    (0..points.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &points[lo..=i];
            (points[i].0, s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64)
        })
        .collect()
}

fn line_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>, RGBColor)],
    baseline: Option<(&str, f64)>,
) -> CliResult<()> {
    let x_max = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("update")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (name, pts, color) in series {
        let c = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
    }
    if let Some((name, y)) = baseline {
        chart
            .draw_series(DashedLineSeries::new(vec![(0.0, y), (x_max, y)], 8, 6, BLACK.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn steps(c: &Cdf, x_max: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0f64.min(c.values[0]), 0.0)];
    let mut prev = 0.0;
    for (&v, &f) in c.values.iter().zip(&c.fractions) {
        pts.push((v, prev));
        pts.push((v, f));
        prev = f;
    }
    pts.push((x_max, prev));
    pts
}

fn cdf_chart(path: &Path, title: &str, x_label: &str, learner: &Cdf, baseline: Option<&Cdf>) -> CliResult<()> {
    let x_max = learner
        .values
        .iter()
        .chain(baseline.map(|b| b.values.iter()).into_iter().flatten())
        .fold(0.0f64, |m, &v| m.max(v));
    let x_max = if x_max > 0.0 { x_max * 1.05 } else { 1.0 };
    let x_min = learner.values[0].min(0.0);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(x_min..x_max, 0.0..1.02)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("cumulative fraction")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(steps(learner, x_max), BLUE.stroke_width(2)))
        .map_err(plot_err)?
        .label("learner")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE.stroke_width(2)));
    if let Some(b) = baseline {
        chart
            .draw_series(DashedLineSeries::new(steps(b, x_max), 8, 6, BLACK.stroke_width(2)))
            .map_err(plot_err)?
            .label("default policy")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn baseline_probability(dir: &Path) -> Option<f64> {
    [dir.join(BASELINE), dir.join("baseline").join(BASELINE)]
        .iter()
        .find(|p| p.exists())
        .and_then(|p| read_json::<BaselineStats>(p).ok())
        .map(|b| b.violation_probability)
}

/// Emit every figure whose inputs exist in `dir` (and its evaluation
/// subdirectories); returns the files written.
pub fn plot_dir(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut written = Vec::new();
    let metrics = dir.join(METRICS);
    if metrics.exists() {
        let rows = read_metrics(&metrics)?;
        let viol: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.violation_probability.map(|v| (r.update as f64, v)))
            .collect();
        let succ: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.success_rate.map(|v| (r.update as f64, v)))
            .collect();
        let p = dir.join("training_violation.svg");
        line_chart(
            &p,
            "Violation probability during training",
            "violation probability",
            &[("learner (20-update mean)", smooth(&viol, 20), BLUE)],
            baseline_probability(dir).map(|b| ("default policy", b)),
        )?;
        written.push(p);
        let p = dir.join("training_success.svg");
        line_chart(
            &p,
            "Success rate during training",
            "success rate",
            &[("learner (20-update mean)", smooth(&succ, 20), RED)],
            None,
        )?;
        written.push(p);
    }
    let mut eval_dirs = vec![dir.to_path_buf()];
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            eval_dirs.push(p);
        }
    }
    eval_dirs.sort();
    for d in eval_dirs {
        let harm = d.join(CDF_HARM);
        let viol = d.join(CDF_VIOLATION);
        if !(harm.exists() && viol.exists()) {
            continue;
        }
        let base = d.join(CDF_DEFAULT_VIOLATION);
        let base = if base.exists() { Some(read_cdf(&base)?) } else { None };
        let h = read_cdf(&harm)?;
        let v = read_cdf(&viol)?;
        if h.values.is_empty() || v.values.is_empty() {
            return Err(CliError::Runtime(format!("empty curve file in {}", d.display())));
        }
        let p = d.join("cdf_harm.svg");
        cdf_chart(&p, "Cumulative distribution of harm", "episode harm", &h, None)?;
        written.push(p);
        let p = d.join("cdf_violation.svg");
        cdf_chart(&p, "Cumulative distribution of violation", "max constraint violation", &v, base.as_ref())?;
        written.push(p);
    }
    if written.is_empty() {
        return Err(CliError::Runtime(format!(
            "nothing to plot in {}: expected {METRICS}, or {CDF_HARM} and {CDF_VIOLATION}",
            dir.display()
        )));
    }
    Ok(written)
}
