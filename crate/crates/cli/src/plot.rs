//! Curve plots (SVG) and feature montages (PNG).

use std::path::Path;

use plotters::prelude::*;
use tristage::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("plot backend: {0}")]
    Backend(String),
}

#[derive(Debug)]
pub struct Series {
    pub label: String,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
}

/// Reads a `threshold,precision,recall,f` table.
pub fn parse_curves(path: &str, text: &str, label: String) -> Result<Series, PlotError> {
    let err = |line: usize, msg: String| PlotError::Parse { path: path.to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "threshold,precision,recall,f" => {}
        _ => return Err(err(1, "expected header `threshold,precision,recall,f`".into())),
    }
    let mut s = Series { label, precision: Vec::new(), recall: Vec::new(), f: Vec::new() };
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(i + 1, format!("{e} in `{line}`")))?;
        if v.len() != 4 {
            return Err(err(i + 1, format!("expected 4 fields, found {}", v.len())));
        }
        if v[0] as usize != s.f.len() {
            return Err(err(i + 1, format!("threshold {} out of sequence", v[0])));
        }
        s.precision.push(v[1]);
        s.recall.push(v[2]);
        s.f.push(v[3]);
    }
    if s.f.len() != 256 {
        return Err(err(s.f.len() + 1, format!("expected 256 threshold rows, found {}", s.f.len())));
    }
    Ok(s)
}

fn backend<E: std::fmt::Debug>(e: E) -> PlotError {
    PlotError::Backend(format!("{e:?}"))
}

/// PR curves beside F-measure against threshold, one line per input.
/// Inputs are `FILE` or `FILE:LABEL`.
pub fn curves(inputs: &[&String], out: &Path) -> anyhow::Result<()> {
    let mut series = Vec::new();
    for spec in inputs {
        let (path, label) = match spec.rsplit_once(':') {
            Some((p, l)) if Path::new(p).exists() => (p.to_string(), l.to_string()),
            _ => {
                let stem = Path::new(spec.as_str()).file_stem().map(|s| s.to_string_lossy().into_owned());
                (spec.to_string(), stem.unwrap_or_else(|| spec.to_string()))
            }
        };
        let text = std::fs::read_to_string(&path).map_err(|e| PlotError::Parse { path: path.clone(), line: 0, msg: e.to_string() })?;
        series.push(parse_curves(&path, &text, label)?);
    }
    let root = SVGBackend::new(out, (1100, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(backend)?;
    let panels = root.split_evenly((1, 2));
    let mut pr = ChartBuilder::on(&panels[0])
        .caption("Precision-recall", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..1.0, 0.0..1.0)
        .map_err(backend)?;
    pr.configure_mesh().x_desc("recall").y_desc("precision").draw().map_err(backend)?;
    let mut fc = ChartBuilder::on(&panels[1])
        .caption("F-measure", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..255.0, 0.0..1.0)
        .map_err(backend)?;
    fc.configure_mesh().x_desc("threshold").y_desc("F").draw().map_err(backend)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        pr.draw_series(LineSeries::new(s.recall.iter().copied().zip(s.precision.iter().copied()), color.stroke_width(2)))
            .map_err(backend)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        fc.draw_series(LineSeries::new(s.f.iter().enumerate().map(|(k, &f)| (k as f64, f)), color.stroke_width(2)))
            .map_err(backend)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    for chart in [&mut pr, &mut fc] {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(backend)?;
    }
    root.present().map_err(backend)?;
    Ok(())
}

const TILE: u32 = 64;
const GAP: u32 = 2;

/// One row per feature map, its first `channels` channels min-max scaled to
/// gray and tiled left to right.
pub fn montage(taps: &[(&str, Tensor<f32>)], channels: usize, out: &Path) -> anyhow::Result<()> {
    let cols = channels.max(1) as u32;
    let rows = taps.len() as u32;
    let mut canvas = image::GrayImage::from_pixel(cols * (TILE + GAP) + GAP, rows * (TILE + GAP) + GAP, image::Luma([255]));
    for (r, (name, t)) in taps.iter().enumerate() {
        let (_, c, h, w) = t.dims4();
        log::info!("montage row {r}: {name} ({c} channels at {h}x{w})");
        for k in 0..c.min(cols as usize) {
            let plane = t.plane(0, k);
            let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = (hi - lo).max(f32::EPSILON);
            let gray: Vec<u8> = plane.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect();
            let tile = image::GrayImage::from_raw(w as u32, h as u32, gray).expect("plane size");
            let tile = image::imageops::resize(&tile, TILE, TILE, image::imageops::FilterType::Nearest);
            let (x0, y0) = (GAP + k as u32 * (TILE + GAP), GAP + r as u32 * (TILE + GAP));
            image::imageops::replace(&mut canvas, &tile, i64::from(x0), i64::from(y0));
        }
    }
    canvas.save(out)?;
    Ok(())
}
