//! Static SVG charts drawn from the CSV rows only.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use crate::report::{A2aRow, SummaryRow};

#[derive(Debug, thiserror::Error)]
#[error("plot {path}: {msg}")]
pub struct PlotError {
    pub path: String,
    pub msg: String,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn bounds(series: &Series, pad_log: bool) -> ((f64, f64), (f64, f64)) {
    let pts: Vec<(f64, f64)> = series.values().flatten().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let lo_hi = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (1.0, 10.0)
        } else if pad_log {
            (lo / 1.5, hi * 1.5)
        } else {
            let pad = ((hi - lo) * 0.1).max(hi.abs() * 0.05).max(1e-12);
            (lo - pad, hi + pad)
        }
    };
    (lo_hi(&|p| p.0), lo_hi(&|p| p.1))
}

fn err(path: &Path) -> impl Fn(String) -> PlotError + '_ {
    move |msg| PlotError {
        path: path.display().to_string(),
        msg,
    }
}

fn loglog<DB: DrawingBackend>(area: &DrawingArea<DB, plotters::coord::Shift>, title: &str, xlabel: &str, series: &Series) -> Result<(), String>
where
    DB::ErrorType: 'static,
{
    let ((x0, x1), (y0, y1)) = bounds(series, true);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale())
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc(xlabel)
        .y_desc("total time (s)")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .x_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1.is_finite() && p.1 > 0.0).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), c.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, c.filled())))
            .map_err(|e| e.to_string())?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(|e| e.to_string())
}

/// Size sweep and iteration sweep side by side, log-log.
pub fn a2a_svg(rows: &[A2aRow], path: &Path) -> Result<(), PlotError> {
    let mut size = Series::new();
    let mut iters = Series::new();
    for r in rows.iter().filter(|r| r.completed) {
        let name = format!("{} k={} n={}", r.mode, r.bound_k, r.ranks);
        match r.sweep.as_str() {
            "size" => size.entry(name).or_default().push((r.size_bytes as f64, r.total_s)),
            _ => iters.entry(name).or_default().push((r.iters as f64, r.total_s)),
        }
    }
    for s in size.values_mut().chain(iters.values_mut()) {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let root = SVGBackend::new(path, (1200, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(path)(e.to_string()))?;
    let (left, right) = root.split_horizontally(600);
    loglog(&left, "alltoallv: time vs message size", "bytes per peer", &size).map_err(err(path))?;
    loglog(&right, "alltoallv: time vs iterations (32 KB)", "iterations", &iters).map_err(err(path))?;
    root.present().map_err(|e| err(path)(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Latency,
    Throughput,
}

impl Metric {
    fn get(&self, r: &SummaryRow) -> (f64, f64) {
        match self {
            Metric::Latency => (r.latency_mean, r.latency_ci95),
            Metric::Throughput => (r.throughput_mean, r.throughput_ci95),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Metric::Latency => "mean batch latency (s)",
            Metric::Throughput => "throughput (batches/s)",
        }
    }
}

/// Metric vs bound for each bls configuration, with each synchronous run
/// drawn as a dashed horizontal line.
pub fn bound_sweep_svg(rows: &[SummaryRow], metric: Metric, path: &Path) -> Result<(), PlotError> {
    let e = err(path);
    let mut bls = Series::new();
    let mut sync: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let (v, _) = metric.get(r);
        let name = format!("{} {}", r.workload, r.backend_mode);
        if r.is_sync() {
            sync.push((name, v));
        } else {
            bls.entry(name).or_default().push((r.bound_k as f64, v));
        }
    }
    for s in bls.values_mut() {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let mut all = bls.clone();
    let kmax = bls.values().flatten().map(|p| p.0).fold(1.0, f64::max);
    for (n, v) in &sync {
        all.insert(format!("{n} sync"), vec![(0.0, *v), (kmax, *v)]);
    }
    let ((_, _), (y0, y1)) = bounds(&all, false);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|x| e(x.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} vs bound k", metric.label()), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80)
        .build_cartesian_2d(-0.25..kmax + 0.25, y0..y1)
        .map_err(|x| e(x.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("bound k")
        .y_desc(metric.label())
        .draw()
        .map_err(|x| e(x.to_string()))?;
    let mut i = 0;
    for (name, pts) in &bls {
        let c = PALETTE[i % PALETTE.len()];
        i += 1;
        chart
            .draw_series(LineSeries::new(pts.clone(), c.stroke_width(2)))
            .map_err(|x| e(x.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        let ci: Vec<(f64, (f64, f64))> = rows
            .iter()
            .filter(|r| !r.is_sync() && format!("{} {}", r.workload, r.backend_mode) == *name)
            .map(|r| {
                let (v, h) = metric.get(r);
                let h = if h.is_finite() { h } else { 0.0 };
                (r.bound_k as f64, (v - h, v + h))
            })
            .collect();
        chart
            .draw_series(ci.into_iter().map(|(x, (lo, hi))| PathElement::new(vec![(x, lo), (x, hi)], c.stroke_width(1))))
            .map_err(|x| e(x.to_string()))?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, c.filled())))
            .map_err(|x| e(x.to_string()))?;
    }
    for (name, v) in &sync {
        let c = PALETTE[i % PALETTE.len()];
        i += 1;
        let dashes: Vec<PathElement<(f64, f64)>> = dash_segments(-0.25, kmax + 0.25, 40)
            .into_iter()
            .map(|(a, b)| PathElement::new(vec![(a, *v), (b, *v)], c.stroke_width(2)))
            .collect();
        chart
            .draw_series(dashes)
            .map_err(|x| e(x.to_string()))?;
        chart
            .draw_series(std::iter::once(PathElement::new(vec![(-0.25, *v), (-0.25, *v)], c.stroke_width(2))))
            .map_err(|x| e(x.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 6, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|x| e(x.to_string()))?;
    root.present().map_err(|x| e(x.to_string()))
}

fn dash_segments(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let w = (b - a) / n as f64;
    (0..n).step_by(2).map(|i| (a + i as f64 * w, a + (i + 1) as f64 * w)).collect()
}
