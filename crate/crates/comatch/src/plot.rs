//! Loss-curve and qualitative-result rendering to PNG.

use crate::data::PairSample;
use crate::eval::{binarize, BinarizeMethod};
use crate::geometry::{warp, TransformParams};
use crate::networks::Model;
use crate::{Error, Result};
use image::{Rgb, RgbImage};
use ndarray::ArrayD;
use std::path::Path;

const SERIES_COLORS: [(Rgb<u8>, &str); 6] = [
    (Rgb([20, 20, 20]), "total"),
    (Rgb([214, 69, 65]), "matching"),
    (Rgb([31, 119, 180]), "cycle"),
    (Rgb([44, 160, 44]), "trans"),
    (Rgb([148, 103, 189]), "contrast"),
    (Rgb([255, 127, 14]), "task"),
];

fn draw_line(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let x = x0 + t * (x1 - x0);
        let y = y0 + t * (y1 - y0);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Render the training loss CSV (`step,total,matching,...`) as a line plot.
pub fn plot_loss_curves(csv_path: &Path, out_png: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); 6];
    for record in reader.records() {
        let record = record?;
        for (i, s) in series.iter_mut().enumerate() {
            let v: f64 = record
                .get(i + 1)
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad loss CSV `{}`", csv_path.display())))?;
            s.push(v);
        }
    }
    let n = series[0].len();
    if n < 2 {
        return Err(Error::Config("loss CSV has fewer than two rows".into()));
    }
    let (w, h, margin) = (900u32, 540u32, 40.0f32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let lo = series
        .iter()
        .flat_map(|s| s.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = series
        .iter()
        .flat_map(|s| s.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let to_xy = |i: usize, v: f64| -> (f32, f32) {
        let x = margin + (i as f32 / (n - 1) as f32) * (w as f32 - 2.0 * margin);
        let y = (h as f32 - margin)
            - (((v - lo) / span) as f32) * (h as f32 - 2.0 * margin);
        (x, y)
    };
    // Axes.
    draw_line(&mut img, margin, margin, margin, h as f32 - margin, Rgb([0, 0, 0]));
    draw_line(
        &mut img,
        margin,
        h as f32 - margin,
        w as f32 - margin,
        h as f32 - margin,
        Rgb([0, 0, 0]),
    );
    // Zero line when the range crosses it.
    if lo < 0.0 && hi > 0.0 {
        let (_, y) = to_xy(0, 0.0);
        draw_line(&mut img, margin, y, w as f32 - margin, y, Rgb([200, 200, 200]));
    }
    for (s, (color, _)) in series.iter().zip(SERIES_COLORS) {
        for i in 1..n {
            let (x0, y0) = to_xy(i - 1, s[i - 1]);
            let (x1, y1) = to_xy(i, s[i]);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
    }
    // Legend swatches, top-left.
    for (i, (color, _)) in SERIES_COLORS.iter().enumerate() {
        for dx in 0..18 {
            for dy in 0..4 {
                img.put_pixel(50 + dx, 14 + 12 * i as u32 + dy, *color);
            }
        }
    }
    if let Some(parent) = out_png.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(out_png)?;
    Ok(())
}

fn tile_rgb(img: &ArrayD<f64>) -> RgbImage {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if img.ndim() == 3 {
                [
                    (img[[y, x, 0]].clamp(0.0, 1.0) * 255.0) as u8,
                    (img[[y, x, 1]].clamp(0.0, 1.0) * 255.0) as u8,
                    (img[[y, x, 2]].clamp(0.0, 1.0) * 255.0) as u8,
                ]
            } else {
                let v = (img[[y, x]].clamp(0.0, 1.0) * 255.0) as u8;
                [v, v, v]
            };
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

/// Qualitative panel for one pair: images, the warped A image and mask in
/// B's frame, soft and binarized masks, and ground truth when present.
pub fn qualitative_panel(model: &Model, sample: &PairSample, out_png: &Path) -> Result<()> {
    let pred = model.infer_pair(sample)?;
    let warp_by = |field: &ArrayD<f64>, t: &TransformParams| warp(field, t);
    // Backward sampling through the reverse transform carries A into B.
    let warped_a = warp_by(&sample.image_a, &pred.t_ba)?;
    let warped_mask_a = warp_by(&pred.mask_a, &pred.t_ba)?;
    let mut tiles: Vec<RgbImage> = vec![
        tile_rgb(&sample.image_a),
        tile_rgb(&sample.image_b),
        tile_rgb(&warped_a),
        tile_rgb(&pred.mask_a),
        tile_rgb(&pred.mask_b),
        tile_rgb(&warped_mask_a),
        tile_rgb(&binarize(&pred.mask_a, BinarizeMethod::Otsu)),
        tile_rgb(&binarize(&pred.mask_b, BinarizeMethod::Otsu)),
    ];
    if let (Some(ga), Some(gb)) = (&sample.gt_mask_a, &sample.gt_mask_b) {
        tiles.push(tile_rgb(ga));
        tiles.push(tile_rgb(gb));
    }
    let (th, tw) = (tiles[0].height(), tiles[0].width());
    let gap = 2u32;
    let cols = 5u32.min(tiles.len() as u32);
    let rows = (tiles.len() as u32).div_ceil(cols);
    let mut panel = RgbImage::from_pixel(
        cols * tw + (cols + 1) * gap,
        rows * th + (rows + 1) * gap,
        Rgb([230, 230, 230]),
    );
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        let ox = gap + c * (tw + gap);
        let oy = gap + r * (th + gap);
        for y in 0..th {
            for x in 0..tw {
                panel.put_pixel(ox + x, oy + y, *tile.get_pixel(x, y));
            }
        }
    }
    if let Some(parent) = out_png.parent() {
        std::fs::create_dir_all(parent)?;
    }
    panel.save(out_png)?;
    Ok(())
}
