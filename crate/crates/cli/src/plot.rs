//! Minimal PR-curve renderer: axes, grid, and a recall-vs-precision
//! polyline on a white canvas. No text — the CSV next to it carries the
//! numbers.

use image::{Rgb, RgbImage};
use sod_core::metrics::PrCurve;
use sod_core::Result;
use std::path::Path;

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 48;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

/// Map (recall, precision) in [0,1]² to canvas coordinates.
fn to_px(recall: f64, precision: f64) -> (i64, i64) {
    let plot_w = (W - 2 * MARGIN) as f64;
    let plot_h = (H - 2 * MARGIN) as f64;
    let x = MARGIN as f64 + recall.clamp(0.0, 1.0) * plot_w;
    let y = (H - MARGIN) as f64 - precision.clamp(0.0, 1.0) * plot_h;
    (x.round() as i64, y.round() as i64)
}

pub fn render_pr_plot(pr: &PrCurve, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grid = Rgb([220, 220, 220]);
    let axis = Rgb([0, 0, 0]);
    let curve = Rgb([30, 60, 200]);
    for i in 1..4 {
        let t = i as f64 / 4.0;
        let (gx, _) = to_px(t, 0.0);
        let (_, gy) = to_px(0.0, t);
        line(&mut img, gx, MARGIN as i64, gx, (H - MARGIN) as i64, grid);
        line(&mut img, MARGIN as i64, gy, (W - MARGIN) as i64, gy, grid);
    }
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, _) = to_px(1.0, 0.0);
    let (_, y1) = to_px(0.0, 1.0);
    line(&mut img, x0, y0, x1, y0, axis);
    line(&mut img, x0, y0, x0, y1, axis);
    let pts: Vec<(i64, i64)> = pr
        .recall
        .iter()
        .zip(&pr.precision)
        .map(|(&r, &p)| to_px(r, p))
        .collect();
    for w in pts.windows(2) {
        line(&mut img, w[0].0, w[0].1, w[1].0, w[1].1, curve);
        // thicken by one pixel vertically
        line(&mut img, w[0].0, w[0].1 + 1, w[1].0, w[1].1 + 1, curve);
    }
    img.save(path)?;
    Ok(())
}
