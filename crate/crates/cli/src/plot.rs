//! Minimal PNG charts drawn straight into an RGB buffer.
//!
//! Charts carry no text; the numbers they show are in the matching
//! `table.csv`, in the same order as the bars or points.

use std::path::Path;

use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

/// A bar or point value with its spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub mean: f64,
    pub std: f64,
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn y_of(v: f64, top: f64) -> u32 {
    let span = (H - MARGIN - MARGIN / 2) as f64;
    let frac = if top > 0.0 { (v / top).clamp(0.0, 1.0) } else { 0.0 };
    H - MARGIN - (frac * span).round() as u32
}

fn top_of(values: &[Bar]) -> f64 {
    let m = values.iter().map(|b| b.mean + b.std).fold(0.0, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        img.put_pixel(x, y, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (u32, u32), (x1, y1): (u32, u32), c: Rgb<u8>) {
    let steps = x0.abs_diff(x1).max(y0.abs_diff(y1)).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 as f64 + t * (x1 as f64 - x0 as f64);
        let y = y0 as f64 + t * (y1 as f64 - y0 as f64);
        img.put_pixel(x.round() as u32, y.round() as u32, c);
    }
}

/// One bar per value with a one-std whisker, left to right.
pub fn bar_chart(values: &[Bar], path: &Path) -> image::ImageResult<()> {
    let mut img = canvas();
    let top = top_of(values);
    let n = values.len().max(1) as u32;
    let slot = (W - MARGIN - MARGIN / 2) / n;
    for (i, b) in values.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let x0 = MARGIN + 1 + i as u32 * slot + slot / 6;
        let x1 = (x0 + slot * 2 / 3).max(x0 + 1);
        let y = y_of(b.mean, top);
        for x in x0..x1 {
            vline(&mut img, x, y, H - MARGIN - 1, c);
        }
        let mid = (x0 + x1) / 2;
        vline(&mut img, mid, y_of(b.mean - b.std, top), y_of(b.mean + b.std, top), Rgb([0, 0, 0]));
    }
    img.save(path)
}

/// Points joined left to right with one-std whiskers.
pub fn line_chart(values: &[Bar], path: &Path) -> image::ImageResult<()> {
    let mut img = canvas();
    let top = top_of(values);
    let n = values.len().max(1) as u32;
    let slot = (W - MARGIN - MARGIN / 2) / n;
    let c = Rgb(PALETTE[0]);
    let pts: Vec<(u32, u32)> = values
        .iter()
        .enumerate()
        .map(|(i, b)| (MARGIN + 1 + i as u32 * slot + slot / 2, y_of(b.mean, top)))
        .collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], c);
    }
    for (p, b) in pts.iter().zip(values) {
        vline(&mut img, p.0, y_of(b.mean - b.std, top), y_of(b.mean + b.std, top), Rgb([0, 0, 0]));
        for dx in 0..5 {
            vline(&mut img, p.0 + dx - 2, p.1.saturating_sub(2), p.1 + 2, c);
        }
    }
    img.save(path)
}
