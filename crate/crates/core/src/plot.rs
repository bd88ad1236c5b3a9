//! Diagnostic figures as indexed-colour PNG rasters with a fixed palette.
//!
//! Every renderer is a pure function of its inputs, so identical inputs give
//! byte-identical files.

use std::path::Path;

use crate::covparam::CrossCovKind;
use crate::data::{HALF, SIDE};
use crate::error::{Error, Result};
use crate::evaluation::{MetricsReport, Stat};
use crate::tensor::Tensor;

/// Greyscale ink levels: index 0 is white, `GREY_LEVELS - 1` is black.
pub const GREY_LEVELS: u8 = 32;
const VARIANT_BASE: u8 = GREY_LEVELS;
const DIVERGING_BASE: u8 = VARIANT_BASE + 4;
/// Entries in the blue-white-red ramp used for signed values in `[-1, 1]`.
pub const DIVERGING_LEVELS: u8 = 65;

pub const WHITE: u8 = 0;
pub const BLACK: u8 = GREY_LEVELS - 1;
const LIGHT: u8 = 6;

fn variant_rgb(k: u8) -> [u8; 3] {
    [[0x4c, 0x72, 0xb0], [0xdd, 0x84, 0x52], [0x55, 0xa8, 0x68], [0x81, 0x72, 0xb2]][k as usize]
}

/// The RGB palette shared by every figure.
pub fn palette() -> Vec<u8> {
    let mut p = Vec::with_capacity(3 * (DIVERGING_BASE + DIVERGING_LEVELS) as usize);
    for i in 0..GREY_LEVELS {
        let v = 255 - (i as u32 * 255 / (GREY_LEVELS as u32 - 1)) as u8;
        p.extend([v, v, v]);
    }
    for k in 0..4 {
        p.extend(variant_rgb(k));
    }
    let (neg, pos) = ([59.0, 76.0, 192.0], [180.0, 4.0, 38.0]);
    for i in 0..DIVERGING_LEVELS {
        let t = 2.0 * i as f64 / (DIVERGING_LEVELS - 1) as f64 - 1.0;
        let end = if t < 0.0 { neg } else { pos };
        let a = t.abs();
        for c in 0..3 {
            p.push((255.0 * (1.0 - a) + end[c] * a).round() as u8);
        }
    }
    p
}

/// Palette index of ink intensity `v ∈ [0, 1]`.
pub fn grey_index(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * (GREY_LEVELS - 1) as f64).round() as u8
}

/// Palette index of a signed value `v ∈ [-1, 1]`.
pub fn diverging_index(v: f64) -> u8 {
    let t = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    DIVERGING_BASE + (t * (DIVERGING_LEVELS - 1) as f64).round() as u8
}

pub fn variant_index(kind: CrossCovKind) -> u8 {
    VARIANT_BASE
        + match kind {
            CrossCovKind::Zero => 0,
            CrossCovKind::BoundedSvd => 1,
            CrossCovKind::ScaledOrthogonal => 2,
        }
}

/// Row-major image of palette indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Raster {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Out-of-bounds writes are clipped.
    pub fn set(&mut self, x: usize, y: usize, c: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = c;
        }
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: u8) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.pixels[yy * self.width + xx] = c;
            }
        }
    }

    /// Draws `text` with the built-in 3x5 font at integer `scale`.
    pub fn text(&mut self, x: usize, y: usize, text: &str, scale: usize, c: u8) {
        for (i, ch) in text.chars().enumerate() {
            let rows = glyph(ch);
            let ox = x + i * 4 * scale;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.fill_rect(ox + col * scale, y + r * scale, scale, scale, c);
                    }
                }
            }
        }
    }

    pub fn to_png(&self, text: &[(&str, String)]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette());
            for (k, v) in text {
                enc.add_text_chunk(k.to_string(), v.clone()).map_err(png_err)?;
            }
            let mut w = enc.write_header().map_err(png_err)?;
            w.write_image_data(&self.pixels).map_err(png_err)?;
            w.finish().map_err(png_err)?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path, text: &[(&str, String)]) -> Result<()> {
        std::fs::write(path, self.to_png(text)?)?;
        Ok(())
    }
}

fn png_err(e: png::EncodingError) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Pixel width of `text` at `scale`.
pub fn text_width(text: &str, scale: usize) -> usize {
    let n = text.chars().count();
    if n == 0 {
        0
    } else {
        (4 * n - 1) * scale
    }
}

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' | 'O' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        '-' => [0, 0, 0b111, 0, 0],
        '=' => [0, 0b111, 0, 0b111, 0],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        _ => [0; 5],
    }
}

/// Tiles of whole digits: `top` rows fill the upper 14 pixel rows of each
/// 28x28 tile and `bottom` rows the lower 14. Values are ink in `[0, 1]`.
pub fn digits_grid(top: &Tensor, bottom: &Tensor, per_row: usize) -> Result<Raster> {
    if top.cols() != HALF || bottom.cols() != HALF {
        return Err(Error::dim(format!("digit halves must be {HALF} wide, got {} and {}", top.cols(), bottom.cols())));
    }
    if top.rows() != bottom.rows() {
        return Err(Error::dim("top and bottom halves have different row counts"));
    }
    if top.rows() == 0 || per_row == 0 {
        return Err(Error::Usage("digits grid needs at least one example and one column".into()));
    }
    let n = top.rows();
    let cols = per_row.min(n);
    let rows = n.div_ceil(cols);
    let mut img = Raster::new(cols * SIDE, rows * SIDE, WHITE);
    for k in 0..n {
        let (ox, oy) = ((k % cols) * SIDE, (k / cols) * SIDE);
        for (half, src) in [top, bottom].into_iter().enumerate() {
            for (p, &v) in src.row_slice(k).iter().enumerate() {
                img.set(ox + p % SIDE, oy + half * SIDE / 2 + p / SIDE, grey_index(v));
            }
        }
    }
    Ok(img)
}

pub const HEATMAP_CELL: usize = 12;
const MARGIN: usize = 4;

/// Signed colour map of a correlation matrix with its Frobenius norm
/// written underneath.
pub fn corr_heatmap(corr: &Tensor, norm: f64) -> Raster {
    let label = format!("NORM={norm:.3}");
    let (gw, gh) = (corr.cols() * HEATMAP_CELL, corr.rows() * HEATMAP_CELL);
    let width = 2 * MARGIN + gw.max(text_width(&label, 2));
    let height = 3 * MARGIN + gh + 10;
    let mut img = Raster::new(width, height, WHITE);
    for r in 0..corr.rows() {
        for c in 0..corr.cols() {
            let v = corr.get(r, c);
            let idx = if v.is_finite() { diverging_index(v) } else { LIGHT };
            img.fill_rect(MARGIN + c * HEATMAP_CELL, MARGIN + r * HEATMAP_CELL, HEATMAP_CELL, HEATMAP_CELL, idx);
        }
    }
    img.text(MARGIN, 2 * MARGIN + gh, &label, 2, BLACK);
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub cell: String,
    pub variant: CrossCovKind,
    pub stat: Stat,
}

/// One bar per (variant, accuracy cell) present in the report, grouped by
/// cell in key order.
pub fn accuracy_bar_list(report: &MetricsReport) -> Vec<Bar> {
    let mut cells: Vec<&str> = report
        .summary
        .iter()
        .flat_map(|s| s.metrics.keys())
        .filter_map(|k| k.strip_prefix("accuracy."))
        .collect();
    cells.sort();
    cells.dedup();
    let mut bars = Vec::new();
    for cell in cells {
        for s in &report.summary {
            if let Some(stat) = s.metrics.get(&format!("accuracy.{cell}")) {
                bars.push(Bar {
                    cell: cell.to_string(),
                    variant: s.variant,
                    stat: *stat,
                });
            }
        }
    }
    bars
}

const BAR_W: usize = 10;
const PLOT_H: usize = 200;

/// Grouped accuracy bars on a 0-100 axis with ±1 sd error bars.
pub fn accuracy_bars(bars: &[Bar]) -> Result<Raster> {
    if bars.is_empty() {
        return Err(Error::Usage("report has no classifier accuracies to plot".into()));
    }
    let groups = {
        let mut g = 1;
        for w in bars.windows(2) {
            if w[0].cell != w[1].cell {
                g += 1;
            }
        }
        g
    };
    let left = 8 * MARGIN;
    let width = left + bars.len() * (BAR_W + 2) + groups * 3 * BAR_W + MARGIN;
    let height = PLOT_H + 2 * MARGIN + 12;
    let base = MARGIN + PLOT_H;
    let mut img = Raster::new(width, height, WHITE);
    let y_of = |v: f64| base - ((v.clamp(0.0, 100.0) / 100.0) * PLOT_H as f64).round() as usize;
    for tick in (0..=100).step_by(10) {
        let y = y_of(tick as f64);
        img.fill_rect(left, y, width - left - MARGIN, 1, LIGHT);
        if tick % 50 == 0 {
            let label = tick.to_string();
            img.text(left - MARGIN - text_width(&label, 1), y.saturating_sub(2), &label, 1, BLACK);
        }
    }
    let mut x = left + 3 * BAR_W / 2;
    for (i, bar) in bars.iter().enumerate() {
        if i > 0 && bars[i - 1].cell != bar.cell {
            x += 3 * BAR_W;
        }
        let top = y_of(bar.stat.mean);
        img.fill_rect(x, top, BAR_W, base - top, variant_index(bar.variant));
        let (lo, hi) = (y_of(bar.stat.mean - bar.stat.sd), y_of(bar.stat.mean + bar.stat.sd));
        let mid = x + BAR_W / 2;
        img.fill_rect(mid, hi, 1, lo - hi + 1, BLACK);
        img.fill_rect(mid - 2, hi, 5, 1, BLACK);
        img.fill_rect(mid - 2, lo, 5, 1, BLACK);
        x += BAR_W + 2;
    }
    img.fill_rect(left, base, width - left - MARGIN, 1, BLACK);
    img.fill_rect(left, MARGIN, 1, PLOT_H, BLACK);
    Ok(img)
}
