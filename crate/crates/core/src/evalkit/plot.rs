//! Report files and per-N line plots.
//!
//! Plots are bare raster charts (axes, gridlines, one colored polyline per
//! configuration); `plots.json` carries the series values, colors and axis
//! ranges that the images do not label.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Aggregates, EvalReport};
use crate::error::{Error, Result};
use crate::pose::bresenham;
use crate::raster::RgbImage;

pub const PLOT_FILES: [&str; 3] = ["resemblance_vs_n.png", "association_vs_n.png", "time_vs_n.png"];

const PALETTE: [[f32; 3]; 6] =
    [[0.12, 0.47, 0.71], [1.0, 0.5, 0.05], [0.17, 0.63, 0.17], [0.84, 0.15, 0.16], [0.58, 0.4, 0.74], [0.55, 0.34, 0.29]];
const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 32;

#[derive(Serialize)]
struct Series {
    label: String,
    color: [f32; 3],
    points: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct PlotInfo {
    file: &'static str,
    metric: &'static str,
    x_range: (usize, usize),
    y_range: (f64, f64),
    series: Vec<Series>,
}

fn metric(a: &Aggregates, k: usize) -> Option<f64> {
    [a.mean_resemblance, a.association_accuracy, a.mean_seconds][k]
}

fn draw(series: &[Series], x_range: (usize, usize), y_range: (f64, f64)) -> RgbImage {
    let mut img = RgbImage::filled(W, H, [1.0; 3]);
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let px = |x: usize| {
        let span = (x_range.1 - x_range.0).max(1) as f64;
        (MARGIN as f64 + (x - x_range.0) as f64 / span * pw).round() as i32
    };
    let py = |y: f64| {
        let span = (y_range.1 - y_range.0).max(1e-12);
        (H as f64 - MARGIN as f64 - (y - y_range.0) / span * ph).round() as i32
    };
    let put = |img: &mut RgbImage, p: [i32; 2], c: [f32; 3]| {
        if p[0] >= 0 && p[1] >= 0 && (p[0] as usize) < W && (p[1] as usize) < H {
            img.set(p[0] as usize, p[1] as usize, c);
        }
    };
    for k in 1..5 {
        let y = (H - MARGIN) - k * (H - 2 * MARGIN) / 4;
        for x in MARGIN..W - MARGIN {
            put(&mut img, [x as i32, y as i32], [0.88; 3]);
        }
    }
    let (x0, y0, x1, y1) = (MARGIN as i32, (H - MARGIN) as i32, (W - MARGIN) as i32, MARGIN as i32);
    for p in bresenham([x0, y0], [x1, y0]).into_iter().chain(bresenham([x0, y0], [x0, y1])) {
        put(&mut img, p, [0.0; 3]);
    }
    for s in series {
        let pts: Vec<[i32; 2]> = s.points.iter().map(|&(x, y)| [px(x), py(y)]).collect();
        for w in pts.windows(2) {
            for p in bresenham(w[0], w[1]) {
                put(&mut img, p, s.color);
            }
        }
        for p in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, [p[0] + dx, p[1] + dy], s.color);
                }
            }
        }
    }
    img
}

fn write_plots(reports: &[(&str, &EvalReport)], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut infos = Vec::new();
    for (k, (&file, name)) in PLOT_FILES.iter().zip(["resemblance", "association_accuracy", "seconds"]).enumerate() {
        let series: Vec<Series> = reports
            .iter()
            .enumerate()
            .map(|(i, (label, r))| Series {
                label: label.to_string(),
                color: PALETTE[i % PALETTE.len()],
                points: r.per_n.iter().filter_map(|b| metric(&b.aggregates, k).map(|v| (b.n, v))).collect(),
            })
            .collect();
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let x_range = (xs.clone().min().unwrap_or(0), xs.max().unwrap_or(1));
        let y_range = if k < 2 {
            (if k == 0 { -1.0 } else { 0.0 }, 1.0)
        } else {
            let top = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(0.0, f64::max);
            (0.0, if top > 0.0 { top * 1.1 } else { 1.0 })
        };
        let path = dir.join(file);
        draw(&series, x_range, y_range).save_png(&path, 0.0, 1.0)?;
        files.push(path);
        infos.push(PlotInfo { file, metric: name, x_range, y_range, series });
    }
    let info = dir.join("plots.json");
    fs::write(&info, serde_json::to_vec_pretty(&infos)?).map_err(|e| Error::io(&info, e))?;
    files.push(info);
    Ok(files)
}

fn write_json(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}

/// Writes `report.json` and the per-N plots for a single configuration.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    write_json(report, &json)?;
    let mut files = vec![json];
    files.extend(write_plots(&[(&report.eval.label, report)], dir)?);
    Ok(files)
}

/// Writes `report_<label>.json` for each report and plots with one series
/// per configuration.
pub fn emit_comparison(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for r in reports {
        let p = dir.join(format!("report_{}.json", r.eval.label));
        write_json(r, &p)?;
        files.push(p);
    }
    let named: Vec<(&str, &EvalReport)> = reports.iter().map(|r| (r.eval.label.as_str(), r)).collect();
    files.extend(write_plots(&named, dir)?);
    Ok(files)
}
