//! Minimal raster plotting: polyline charts rendered straight into a PNG.
//! Used for the PR-curve figures; no text rendering, just axes, gridlines,
//! and one color per series (legend swatches top-right, series order).

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub struct Series {
    pub label: String,
    /// (x, y) in data coordinates.
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],  // blue
    [214, 39, 40],   // red
    [44, 160, 44],   // green
    [255, 127, 14],  // orange
    [148, 103, 189], // purple
    [23, 190, 207],  // cyan
];

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 48;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn thick_point(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    for dy in 0..2 {
        for dx in 0..2 {
            put(img, x + dx, y + dy, c);
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        thick_point(img, x.round() as i64, y.round() as i64, c);
    }
}

/// Render `series` over the axis-aligned data window `x_range` x `y_range`.
pub fn line_plot(
    path: &Path,
    series: &[Series],
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Result<()> {
    if x_range.1 <= x_range.0 || y_range.1 <= y_range.0 {
        return Err(Error::InvalidArgument(
            "line_plot: empty axis range".into(),
        ));
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let inner_w = (W - 2 * MARGIN) as f64;
    let inner_h = (H - 2 * MARGIN) as f64;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let fx = (x - x_range.0) / (x_range.1 - x_range.0);
        let fy = (y - y_range.0) / (y_range.1 - y_range.0);
        (
            MARGIN as f64 + fx * inner_w,
            (H - MARGIN) as f64 - fy * inner_h,
        )
    };

    // gridlines at tenths, then the frame
    let grid = Rgb([225, 225, 225]);
    for step in 0..=10 {
        let f = step as f64 / 10.0;
        let gx = MARGIN as f64 + f * inner_w;
        let gy = (H - MARGIN) as f64 - f * inner_h;
        draw_line(&mut img, (gx, MARGIN as f64), (gx, (H - MARGIN) as f64), grid);
        draw_line(&mut img, (MARGIN as f64, gy), ((W - MARGIN) as f64, gy), grid);
    }
    let frame = Rgb([0, 0, 0]);
    let (x0, y0) = (MARGIN as f64, MARGIN as f64);
    let (x1, y1) = ((W - MARGIN) as f64, (H - MARGIN) as f64);
    draw_line(&mut img, (x0, y0), (x1, y0), frame);
    draw_line(&mut img, (x0, y1), (x1, y1), frame);
    draw_line(&mut img, (x0, y0), (x0, y1), frame);
    draw_line(&mut img, (x1, y0), (x1, y1), frame);

    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for pair in s.points.windows(2) {
            draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
        }
        // legend swatch, top-right, stacked by series index
        let sy = (MARGIN + 8 + 10 * i as u32) as f64;
        let sx = (W - MARGIN - 24) as f64;
        draw_line(&mut img, (sx, sy), (sx + 16.0, sy), color);
    }

    img.save(path).map_err(|e| Error::image(path, e))
}
