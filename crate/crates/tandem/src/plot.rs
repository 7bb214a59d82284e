//! Raster plots without a plotting dependency: loss curves, validation
//! curves, grouped bars with error whiskers, and segmentation contour
//! overlays, all written as PNG.

use std::path::Path;

use crate::data::{ImageSample, LabelMask};
use crate::error::{Error, Result};
use crate::metrics::boundary;
use crate::trainer::{LossRow, ValRow};

const BACKGROUND: [u8; 3] = [250, 250, 250];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
/// Matplotlib-like categorical palette.
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [0, 0, 0],
];
const TRUTH_COLOR: [u8; 3] = [0, 190, 40];
const PRED_COLOR: [u8; 3] = [230, 40, 40];
const BOTH_COLOR: [u8; 3] = [235, 200, 30];

pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Canvas {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&BACKGROUND);
        }
        Canvas {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Set one pixel; coordinates outside the canvas are ignored.
    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Bresenham line, endpoints included.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
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

    pub fn fill_rect(&mut self, x: i64, y: i64, w: usize, h: usize, color: [u8; 3]) {
        for yy in 0..h as i64 {
            for xx in 0..w as i64 {
                self.set(x + xx, y + yy, color);
            }
        }
    }

    /// Draw text in the built-in 5x7 font; unknown characters render as
    /// blanks. Returns the x coordinate after the last glyph.
    pub fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) -> i64 {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = glyph(ch);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0b10000 >> col) != 0 {
                        self.set(cx + col as i64, y + row as i64, color);
                    }
                }
            }
            cx += 6;
        }
        cx
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                source: other,
            },
        })
    }
}

/// 5x7 glyphs; each row uses the low five bits, bit 4 leftmost.
fn glyph(ch: char) -> [u8; 7] {
    let up = ch.to_ascii_uppercase();
    match up {
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00100, 0b00100, 0b01000],
        '-' => [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000],
        '+' => [0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '/' => [0b00001, 0b00010, 0b00100, 0b00100, 0b00100, 0b01000, 0b10000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        _ => [0; 7],
    }
}

struct Frame {
    left: f64,
    top: f64,
    w: f64,
    h: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = if self.x_max > self.x_min {
            (x - self.x_min) / (self.x_max - self.x_min)
        } else {
            0.5
        };
        let fy = if self.y_max > self.y_min {
            (y - self.y_min) / (self.y_max - self.y_min)
        } else {
            0.5
        };
        (
            (self.left + fx * self.w).round() as i64,
            (self.top + (1.0 - fy) * self.h).round() as i64,
        )
    }
}

fn draw_axes(c: &mut Canvas, f: &Frame, x_label: &str, title: &str) {
    let x0 = f.left as i64;
    let y0 = (f.top + f.h) as i64;
    let x1 = (f.left + f.w) as i64;
    let y1 = f.top as i64;
    // Horizontal grid lines and y tick labels.
    for k in 0..=4 {
        let v = f.y_min + (f.y_max - f.y_min) * k as f64 / 4.0;
        let (_, py) = f.to_px(f.x_min, v);
        if k > 0 {
            c.line(x0, py, x1, py, GRID);
        }
        c.text(2, py - 3, &format!("{v:.3}"), AXIS);
    }
    c.line(x0, y0, x1, y0, AXIS);
    c.line(x0, y0, x0, y1, AXIS);
    for (frac, value) in [(0.0, f.x_min), (0.5, (f.x_min + f.x_max) / 2.0), (1.0, f.x_max)] {
        let px = (f.left + frac * f.w) as i64;
        c.line(px, y0, px, y0 + 3, AXIS);
        let label = format!("{}", value.round() as i64);
        c.text(px - 3 * label.len() as i64, y0 + 6, &label, AXIS);
    }
    c.text(x0, y0 + 16, x_label, AXIS);
    c.text(x0, 4, title, AXIS);
}

/// Polyline through finite points; non-finite values break the line.
fn draw_series(c: &mut Canvas, f: &Frame, points: &[(f64, f64)], color: [u8; 3]) {
    let mut prev: Option<(i64, i64)> = None;
    for &(x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            prev = None;
            continue;
        }
        let p = f.to_px(x, y);
        if let Some(q) = prev {
            c.line(q.0, q.1, p.0, p.1, color);
        } else {
            c.set(p.0, p.1, color);
        }
        prev = Some(p);
    }
}

fn draw_legend(c: &mut Canvas, f: &Frame, entries: &[(&str, [u8; 3])]) {
    let x = (f.left + f.w) as i64 - 70;
    let mut y = f.top as i64 + 4;
    for (name, color) in entries {
        c.line(x, y + 3, x + 12, y + 3, *color);
        c.text(x + 16, y, name, AXIS);
        y += 10;
    }
}

fn series_bounds(series: &[Vec<(f64, f64)>]) -> Option<(f64, f64, f64, f64)> {
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for points in series {
        for &(x, y) in points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            bounds = Some(match bounds {
                None => (x, x, y, y),
                Some((a, b, lo, hi)) => (a.min(x), b.max(x), lo.min(y), hi.max(y)),
            });
        }
    }
    bounds
}

/// Loss curves for one student: every term plus the weighted total.
pub fn plot_loss_curves(rows: &[LossRow], student: u8, path: &Path) -> Result<()> {
    let mine: Vec<&LossRow> = rows.iter().filter(|r| r.student == student).collect();
    if mine.is_empty() {
        return Err(Error::EmptyInput("loss rows for requested student"));
    }
    type Term = fn(&LossRow) -> f64;
    let terms: [(&str, Term); 6] = [
        ("SUP", |r| r.sup),
        ("H", |r| r.h),
        ("S", |r| r.s),
        ("CDD", |r| r.cdd),
        ("CR", |r| r.cr),
        ("TOTAL", |r| r.total),
    ];
    let series: Vec<(&str, Vec<(f64, f64)>)> = terms
        .iter()
    .map(|(name, get)| {
        (
            *name,
            mine.iter()
                .map(|r| (r.iteration as f64, get(r)))
                .collect::<Vec<_>>(),
        )
    })
    .collect();

    let all: Vec<Vec<(f64, f64)>> = series.iter().map(|(_, p)| p.clone()).collect();
    let (x_min, x_max, y_min, y_max) =
        series_bounds(&all).ok_or(Error::EmptyInput("no finite loss values"))?;
    let mut c = Canvas::new(640, 360);
    let f = Frame {
        left: 52.0,
        top: 18.0,
        w: 640.0 - 52.0 - 14.0,
        h: 360.0 - 18.0 - 34.0,
        x_min,
        x_max,
        y_min: y_min.min(0.0),
        y_max: y_max.max(y_min + 1e-9),
    };
    draw_axes(&mut c, &f, "ITERATION", &format!("LOSS TERMS, STUDENT {student}"));
    let mut legend = Vec::new();
    for (i, (name, points)) in series.iter().enumerate() {
        draw_series(&mut c, &f, points, PALETTE[i]);
        legend.push((*name, PALETTE[i]));
    }
    draw_legend(&mut c, &f, &legend);
    c.save(path)
}

/// Validation overlap curves for student1, student2, and the teacher.
pub fn plot_validation_curves(rows: &[ValRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("validation rows"));
    }
    let models = ["student1", "student2", "teacher"];
    let series: Vec<Vec<(f64, f64)>> = models
        .iter()
        .map(|m| {
            rows.iter()
                .filter(|r| r.model == *m)
                .map(|r| (r.iteration as f64, r.dsc))
                .collect()
        })
        .collect();
    let (x_min, x_max, _, _) =
        series_bounds(&series).ok_or(Error::EmptyInput("no finite validation values"))?;
    let mut c = Canvas::new(640, 360);
    let f = Frame {
        left: 52.0,
        top: 18.0,
        w: 640.0 - 52.0 - 14.0,
        h: 360.0 - 18.0 - 34.0,
        x_min,
        x_max,
        y_min: 0.0,
        y_max: 1.0,
    };
    draw_axes(&mut c, &f, "ITERATION", "VALIDATION DSC");
    let mut legend = Vec::new();
    for (i, points) in series.iter().enumerate() {
        draw_series(&mut c, &f, points, PALETTE[i]);
        legend.push((models[i], PALETTE[i]));
    }
    draw_legend(&mut c, &f, &legend);
    c.save(path)
}

/// Overlap bars with standard-deviation whiskers, one group per table
/// row. Failed rows render as a baseline marker instead of a bar.
pub fn plot_metric_bars(table: &crate::experiments::ResultsTable, path: &Path) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::EmptyInput("results table rows"));
    }
    let group_w = table
        .rows
        .iter()
        .map(|r| r.label.len() * 6 + 10)
        .max()
        .unwrap()
        .max(40);
    let left = 52usize;
    let width = left + group_w * table.rows.len() + 16;
    let height = 320usize;
    let mut c = Canvas::new(width, height);
    let f = Frame {
        left: left as f64,
        top: 18.0,
        w: (width - left - 16) as f64,
        h: (height - 18 - 34) as f64,
        x_min: 0.0,
        x_max: table.rows.len() as f64,
        y_min: 0.0,
        y_max: 1.0,
    };
    draw_axes(&mut c, &f, "", &format!("{}: TEST DSC", table.title));
    let base_y = (f.top + f.h) as i64;
    for (i, row) in table.rows.iter().enumerate() {
        let cx = f.left + (i as f64 + 0.5) / table.rows.len() as f64 * f.w;
        let bar_w = (group_w as f64 * 0.5) as usize;
        if row.dsc.mean.is_finite() {
            let (_, top) = f.to_px(0.0, row.dsc.mean);
            c.fill_rect(
                cx as i64 - bar_w as i64 / 2,
                top,
                bar_w,
                (base_y - top).max(0) as usize,
                PALETTE[0],
            );
            if row.dsc.std.is_finite() && row.dsc.std > 0.0 {
                let (_, lo) = f.to_px(0.0, (row.dsc.mean - row.dsc.std).max(0.0));
                let (_, hi) = f.to_px(0.0, (row.dsc.mean + row.dsc.std).min(1.0));
                c.line(cx as i64, lo, cx as i64, hi, AXIS);
                c.line(cx as i64 - 3, lo, cx as i64 + 3, lo, AXIS);
                c.line(cx as i64 - 3, hi, cx as i64 + 3, hi, AXIS);
            }
        } else {
            c.text(cx as i64 - 3, base_y - 10, "X", PRED_COLOR);
        }
        let label_x = cx as i64 - (row.label.len() as i64 * 6) / 2;
        c.text(label_x, base_y + 6, &row.label, AXIS);
    }
    c.save(path)
}

/// Grayscale image with ground-truth contours in green and predicted
/// contours in red; agreement renders yellow. Upscaled so the short side
/// is at least 256 pixels.
pub fn plot_overlay(sample: &ImageSample, pred: &LabelMask, path: &Path) -> Result<()> {
    let shape = sample.pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    if pred.height != h || pred.width != w {
        return Err(Error::ShapeMismatch {
            context: "overlay prediction vs image",
            lhs: vec![h, w],
            rhs: vec![pred.height, pred.width],
        });
    }
    let scale = (256usize.div_ceil(h.min(w))).max(1);
    let mut c = Canvas::new(w * scale, h * scale);
    let data = sample.pixels.data();
    for y in 0..h {
        for x in 0..w {
            let v = (data[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            c.fill_rect((x * scale) as i64, (y * scale) as i64, scale, scale, [v, v, v]);
        }
    }
    let mut truth_set = vec![false; h * w];
    if let Some(mask) = &sample.mask {
        for cls in 1..mask.num_classes {
            for (y, x) in boundary(mask, cls) {
                truth_set[y * w + x] = true;
                c.fill_rect(
                    (x * scale) as i64,
                    (y * scale) as i64,
                    scale,
                    scale,
                    TRUTH_COLOR,
                );
            }
        }
    }
    for cls in 1..pred.num_classes {
        for (y, x) in boundary(pred, cls) {
            let color = if truth_set[y * w + x] {
                BOTH_COLOR
            } else {
                PRED_COLOR
            };
            c.fill_rect(
                (x * scale) as i64,
                (y * scale) as i64,
                scale,
                scale,
                color,
            );
        }
    }
    c.save(path)
}
