//! Minimal PNG rendering: image grids and line plots for report bundles.

use crate::data::Image;
use crate::error::{Error, Result};
use std::path::Path;

/// Convert a normalized image to 8-bit RGB.
pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let r = img.resolution() as u32;
    let n = (r * r) as usize;
    image::RgbImage::from_fn(r, r, |x, y| {
        let i = (y * r + x) as usize;
        let px = |c: usize| (img.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Tile images row-major into a `cols x rows` grid with a 2px separator.
pub fn save_grid(images: &[Image], cols: usize, path: &Path) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(Error::validation("cannot render an empty grid"));
    }
    let res = images[0].resolution() as u32;
    let rows = images.len().div_ceil(cols) as u32;
    let sep = 2u32;
    let w = cols as u32 * (res + sep) + sep;
    let h = rows * (res + sep) + sep;
    let mut canvas = image::RgbImage::from_pixel(w, h, image::Rgb([24, 24, 24]));
    for (i, img) in images.iter().enumerate() {
        let tile = to_rgb8(img);
        let ox = sep + (i % cols) as u32 * (res + sep);
        let oy = sep + (i / cols) as u32 * (res + sep);
        for y in 0..res {
            for x in 0..res {
                canvas.put_pixel(ox + x, oy + y, *tile.get_pixel(x, y));
            }
        }
    }
    save_png(&canvas, path)
}

const SERIES_COLORS: [[u8; 3]; 4] = [[66, 133, 244], [219, 68, 55], [15, 157, 88], [244, 180, 0]];

/// Render one or more named series as a simple line plot.
pub fn save_line_plot(series: &[(&str, &[f64])], title: &str, path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().all(|(_, v)| v.is_empty()) {
        return Err(Error::validation("cannot plot empty series"));
    }
    let (w, h) = (640u32, 400u32);
    let (ml, mr, mt, mb) = (50i64, 15i64, 30i64, 30i64);
    let pw = w as i64 - ml - mr;
    let ph = h as i64 - mt - mb;
    let mut canvas = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_len = 0usize;
    for (_, v) in series {
        for x in *v {
            lo = lo.min(*x);
            hi = hi.max(*x);
        }
        max_len = max_len.max(v.len());
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::numerical("non-finite values in plot series"));
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }

    // axes
    for x in 0..=pw {
        put(&mut canvas, ml + x, mt + ph, [0, 0, 0]);
    }
    for y in 0..=ph {
        put(&mut canvas, ml, mt + y, [0, 0, 0]);
    }

    for (si, (_, vals)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let denom = (max_len.max(2) - 1) as f64;
        let mut prev: Option<(i64, i64)> = None;
        for (i, v) in vals.iter().enumerate() {
            let px = ml + ((i as f64 / denom) * pw as f64).round() as i64;
            let py = mt + ph - (((v - lo) / (hi - lo)) * ph as f64).round() as i64;
            if let Some((x0, y0)) = prev {
                draw_line(&mut canvas, x0, y0, px, py, color);
            }
            prev = Some((px, py));
        }
    }

    // crude 5-pixel title marker per series in the top-left corner
    for (si, _) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for dx in 0..12 {
            put(&mut canvas, 8 + dx, 8 + si as i64 * 6, color);
        }
    }
    let _ = title; // written by the report manifest, not rasterized

    save_png(&canvas, path)
}

fn put(canvas: &mut image::RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
        canvas.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn draw_line(canvas: &mut image::RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(canvas, x, y, c);
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

fn save_png(canvas: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::validation(format!("png write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, AttributeSchema};

    #[test]
    fn grid_and_plot_render() {
        let ds = synth_dataset(1, 4, 32, &AttributeSchema::continuous_all()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_grid(&ds.images, 2, &dir.path().join("grid.png")).unwrap();
        save_line_plot(
            &[("loss", &[1.0, 0.5, 0.3, 0.2]), ("val", &[1.1, 0.7, 0.6, 0.55])],
            "curves",
            &dir.path().join("curve.png"),
        )
        .unwrap();
        assert!(dir.path().join("grid.png").exists());
        assert!(dir.path().join("curve.png").exists());
    }

    #[test]
    fn empty_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(save_grid(&[], 2, &dir.path().join("g.png")).is_err());
    }
}
