//! Result presentation: delimited tables, training-log files, and static
//! plot images.
//!
//! Tables are plain comma-delimited text with a header row; aggregate rows
//! are appended with `mean` / `std` in the id column. Training logs are one
//! JSON object per line, so they stream and append naturally. Plots are
//! rendered into PNGs by a small built-in rasterizer (lines, markers,
//! whiskers, and a digit-only tick font) — enough for loss curves and
//! metric-versus-factor charts without pulling in a plotting stack.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::domain::{BinaryMask, Image};
use crate::error::{Error, Result};
use crate::experiment::{AblationResult, NoiseResult};
use crate::metrics::Aggregate;
use crate::trainer::{EpochLog, EvalSummary, TrialReport};

// ---------------------------------------------------------------------------
// Tables

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-sample metric table: `sample_id,dsc,assd` rows plus `mean` and `std`
/// aggregate rows. Either metric column can be dropped, but not both.
pub fn metric_table_csv(summary: &EvalSummary, with_dsc: bool, with_assd: bool) -> Result<String> {
    if !with_dsc && !with_assd {
        return Err(Error::Config("a metric table needs at least one metric column".into()));
    }
    let mut out = String::from("sample_id");
    if with_dsc {
        out.push_str(",dsc");
    }
    if with_assd {
        out.push_str(",assd");
    }
    out.push('\n');
    let mut row = |id: &str, dsc: f64, assd: f64| {
        out.push_str(id);
        if with_dsc {
            out.push(',');
            out.push_str(&fmt(dsc));
        }
        if with_assd {
            out.push(',');
            out.push_str(&fmt(assd));
        }
        out.push('\n');
    };
    for s in &summary.per_sample {
        row(&s.id, s.dsc, s.assd);
    }
    row("mean", summary.dsc.mean, summary.assd.mean);
    row("std", summary.dsc.std, summary.assd.std);
    Ok(out)
}

/// One row per trial (`subset_seed,train_seed,dsc,assd,gate_ratio,gate_pass`)
/// plus `mean` and `std` rows over the per-trial metric means.
pub fn trial_table_csv(report: &TrialReport) -> String {
    let mut out = String::from("subset_seed,train_seed,dsc,assd,gate_ratio,gate_pass\n");
    for t in &report.trials {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.subset_seed,
            t.train_seed,
            fmt(t.dsc),
            fmt(t.assd),
            fmt(t.gate.mean_ratio),
            t.gate.pass
        ));
    }
    out.push_str(&format!("mean,,{},{},,\n", fmt(report.dsc.mean), fmt(report.assd.mean)));
    out.push_str(&format!("std,,{},{},,\n", fmt(report.dsc.std), fmt(report.assd.std)));
    out
}

/// Side-by-side summary of several labelled trial reports.
pub fn comparison_table_csv(rows: &[(String, &TrialReport)]) -> String {
    let mut out = String::from("run,trials,dsc_mean,dsc_std,assd_mean,assd_std\n");
    for (label, report) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            label,
            report.trials.len(),
            fmt(report.dsc.mean),
            fmt(report.dsc.std),
            fmt(report.assd.mean),
            fmt(report.assd.std)
        ));
    }
    out
}

/// Loss-ablation comparison, one row per mode.
pub fn ablation_table_csv(results: &[AblationResult]) -> String {
    let rows: Vec<(String, &TrialReport)> =
        results.iter().map(|r| (r.mode.label().to_string(), &r.report)).collect();
    comparison_table_csv(&rows)
}

/// Box-noise comparison, one row per band.
pub fn noise_table_csv(results: &[NoiseResult]) -> String {
    let rows: Vec<(String, &TrialReport)> =
        results.iter().map(|r| (r.band.label(), &r.report)).collect();
    comparison_table_csv(&rows)
}

/// Ids present in exactly one of the two lists, sorted — used to warn when
/// reports that should cover the same samples do not.
pub fn symmetric_difference(a: &[String], b: &[String]) -> Vec<String> {
    let sa: std::collections::BTreeSet<&String> = a.iter().collect();
    let sb: std::collections::BTreeSet<&String> = b.iter().collect();
    let mut out: Vec<String> =
        sa.symmetric_difference(&sb).map(|s| s.to_string()).collect();
    out.sort();
    out.dedup();
    out
}

// ---------------------------------------------------------------------------
// Training logs

/// Write a training log as one JSON object per line.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for entry in log {
        writeln!(f, "{}", serde_json::to_string(entry)?)?;
    }
    Ok(())
}

/// Read a training log written by [`write_training_log`].
pub fn read_training_log(path: &Path) -> Result<Vec<EpochLog>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plot rasterizer

/// One plotted curve: points in data coordinates, an RGB color, and optional
/// symmetric vertical whiskers (one half-length per point).
#[derive(Debug, Clone)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
    pub whisker: Option<Vec<f64>>,
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 420;
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 16;
const MARGIN_B: u32 = 36;

const COLOR_BG: [u8; 3] = [255, 255, 255];
const COLOR_GRID: [u8; 3] = [225, 225, 225];
const COLOR_AXIS: [u8; 3] = [70, 70, 70];
const COLOR_TEXT: [u8; 3] = [40, 40, 40];

/// Default curve palette, cycled by series index.
pub const PALETTE: [[u8; 3]; 5] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [148, 103, 189], [23, 190, 207]];

/// 5x7 bitmaps for the characters tick labels can contain. Each byte is one
/// row, bit 4 leftmost.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        _ => [0; 7],
    }
}

/// Compact tick formatting using only the characters the font can draw.
fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

struct Canvas {
    img: image::RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut img = image::RgbImage::new(PLOT_W, PLOT_H);
        for p in img.pixels_mut() {
            *p = image::Rgb(COLOR_BG);
        }
        Self { img }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if (0..PLOT_W as i64).contains(&x) && (0..PLOT_H as i64).contains(&y) {
            self.img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn marker(&mut self, (x, y): (i64, i64), color: [u8; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.set(x + dx, y + dy, color);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        for (i, c) in s.chars().enumerate() {
            let g = glyph(c);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits >> (4 - col) & 1 == 1 {
                        self.set(x + i as i64 * 6 + col as i64, y + row as i64, color);
                    }
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

fn data_range(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let w = s.whisker.as_ref().and_then(|w| w.get(i)).copied().unwrap_or(0.0);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y - w);
            y1 = y1.max(y + w);
        }
    }
    let widen = |lo: f64, hi: f64| {
        if !lo.is_finite() || !hi.is_finite() {
            (0.0, 1.0)
        } else if lo == hi {
            (lo - 1.0, hi + 1.0)
        } else {
            let pad = (hi - lo) * 0.04;
            (lo - pad, hi + pad)
        }
    };
    (widen(x0, x1), widen(y0, y1))
}

/// Render curves as a line chart with markers, optional whiskers, a light
/// grid, and numeric tick labels.
pub fn plot_series_png(path: &Path, series: &[Series]) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    let ((x0, x1), (y0, y1)) = data_range(series);
    let (left, right) = (MARGIN_L as i64, (PLOT_W - MARGIN_R) as i64 - 1);
    let (top, bottom) = (MARGIN_T as i64, (PLOT_H - MARGIN_B) as i64 - 1);
    let px = |x: f64| left + ((x - x0) / (x1 - x0) * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - y0) / (y1 - y0) * (bottom - top) as f64).round() as i64;

    let mut c = Canvas::new();
    // Grid and tick labels at five even stops per axis.
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let gx = px(fx);
        let gy = py(fy);
        c.line((gx, top), (gx, bottom), COLOR_GRID);
        c.line((left, gy), (right, gy), COLOR_GRID);
        let xs = format_tick(fx);
        c.text(gx - 3 * xs.len() as i64, bottom + 6, &xs, COLOR_TEXT);
        let ys = format_tick(fy);
        c.text(left - 6 * ys.len() as i64 - 5, gy - 3, &ys, COLOR_TEXT);
    }
    c.line((left, top), (left, bottom), COLOR_AXIS);
    c.line((left, bottom), (right, bottom), COLOR_AXIS);

    for s in series {
        let pts: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| (px(x), py(y))).collect();
        for pair in pts.windows(2) {
            c.line(pair[0], pair[1], s.color);
        }
        for (i, &(gx, gy)) in pts.iter().enumerate() {
            if let Some(w) = s.whisker.as_ref().and_then(|w| w.get(i)) {
                let (wy0, wy1) = (py(s.points[i].1 - w), py(s.points[i].1 + w));
                c.line((gx, wy0), (gx, wy1), s.color);
                c.line((gx - 2, wy0), (gx + 2, wy0), s.color);
                c.line((gx - 2, wy1), (gx + 2, wy1), s.color);
            }
            c.marker((gx, gy), s.color);
        }
    }
    c.save(path)
}

/// Loss curves over epochs: the weighted total plus the four unweighted
/// components, in [`PALETTE`] order (total, pseudo, size, empty, cons).
pub fn plot_loss_curves_png(path: &Path, log: &[EpochLog]) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Config("cannot plot an empty training log".into()));
    }
    let curve = |f: &dyn Fn(&EpochLog) -> f64, color: [u8; 3]| Series {
        points: log.iter().map(|e| (e.epoch as f64, f(e))).collect(),
        color,
        whisker: None,
    };
    plot_series_png(
        path,
        &[
            curve(&|e| e.loss.total, PALETTE[0]),
            curve(&|e| e.loss.pseudo, PALETTE[1]),
            curve(&|e| e.loss.size, PALETTE[2]),
            curve(&|e| e.loss.empty, PALETTE[3]),
            curve(&|e| e.loss.cons, PALETTE[4]),
        ],
    )
}

/// A metric against some factor (training-set size, noise band, ...): mean
/// line with std whiskers.
pub fn plot_aggregates_png(path: &Path, points: &[(f64, Aggregate)]) -> Result<()> {
    let series = Series {
        points: points.iter().map(|&(x, a)| (x, a.mean)).collect(),
        color: PALETTE[0],
        whisker: Some(points.iter().map(|&(_, a)| a.std).collect()),
    };
    plot_series_png(path, &[series])
}

// ---------------------------------------------------------------------------
// Overlays

/// Save the image with the mask blended over it: foreground pixels shift
/// toward red, boundary pixels (foreground with a 4-neighbour background)
/// are drawn solid red.
pub fn save_overlay_png(path: &Path, image: &Image, mask: &BinaryMask) -> Result<()> {
    let (h, w) = image.size();
    if mask.size() != (h, w) {
        return Err(Error::Shape(format!(
            "overlay mask is {:?} but image is {:?}",
            mask.size(),
            (h, w)
        )));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    let fg = |y: i64, x: i64| {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask.get(y as usize, x as usize) == 1
    };
    for y in 0..h {
        for x in 0..w {
            let g = image.gray(y, x).round().clamp(0.0, 255.0) as u8;
            let rgb = if mask.get(y, x) == 1 {
                let (yi, xi) = (y as i64, x as i64);
                let boundary = !(fg(yi - 1, xi) && fg(yi + 1, xi) && fg(yi, xi - 1) && fg(yi, xi + 1));
                if boundary {
                    [220, 40, 40]
                } else {
                    // Blend 55% gray with 45% red.
                    let keep = |v: u8, tint: u8| {
                        (f64::from(v) * 0.55 + f64::from(tint) * 0.45).round() as u8
                    };
                    [keep(g, 220), keep(g, 40), keep(g, 40)]
                }
            } else {
                [g, g, g]
            };
            out.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    out.save(path)?;
    Ok(())
}
