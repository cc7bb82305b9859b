//! Image and mask file I/O plus resize primitives.
//!
//! Images load as `(H, W, 3)` arrays in `[0, 1]`; masks are
//! single-channel 8-bit index images where 255 is the ignore label.
//! Resizing uses center-aligned clamped bilinear for images and
//! nearest-neighbor for masks, so label values are never invented.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::Result;
use crate::upsample::SegmentationMask;

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn save_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                (img[(y, x, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[(y, x, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[(y, x, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

pub fn save_mask(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([labels[(y, x)]]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn save_gray(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    save_mask(path, pixels)
}

/// Center-aligned clamped bilinear resize, any channel count.
pub fn bilinear_resize(img: &Array3<f64>, hh: usize, ww: usize) -> Array3<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Array3::from_shape_fn((hh, ww, c), |(y, x, ch)| {
        let cy = (y as f64 + 0.5) * h as f64 / hh as f64 - 0.5;
        let cx = (x as f64 + 0.5) * w as f64 / ww as f64 - 0.5;
        let j0 = cy.floor();
        let k0 = cx.floor();
        let ty = cy - j0;
        let tx = cx - k0;
        let cj = |v: f64| (v.max(0.0) as usize).min(h - 1);
        let ck = |v: f64| (v.max(0.0) as usize).min(w - 1);
        (1.0 - ty) * (1.0 - tx) * img[(cj(j0), ck(k0), ch)]
            + (1.0 - ty) * tx * img[(cj(j0), ck(k0 + 1.0), ch)]
            + ty * (1.0 - tx) * img[(cj(j0 + 1.0), ck(k0), ch)]
            + ty * tx * img[(cj(j0 + 1.0), ck(k0 + 1.0), ch)]
    })
}

/// Nearest-neighbor resize for index masks.
pub fn nearest_resize(mask: &Array2<u8>, hh: usize, ww: usize) -> Array2<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    Array2::from_shape_fn((hh, ww), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / hh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / ww as f64) as usize).min(w - 1);
        mask[(sy, sx)]
    })
}

/// Deterministic display palette: a golden-ratio hue walk.
pub fn default_palette(m: usize) -> Vec<[u8; 3]> {
    (0..m)
        .map(|i| {
            let hue = (i as f64 * 0.618_033_988_75).fract() * 360.0;
            hsv_to_rgb(hue, 0.65, 0.95)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Sidecar palette file: one `index<TAB>r<TAB>g<TAB>b<TAB>name` line
/// per class.
pub fn write_palette(path: &Path, names: &[String]) -> Result<()> {
    let palette = default_palette(names.len());
    let mut text = String::new();
    for (i, (rgb, name)) in palette.iter().zip(names).enumerate() {
        text.push_str(&format!("{i}\t{}\t{}\t{}\t{name}\n", rgb[0], rgb[1], rgb[2]));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Renders a mask through the default palette; ignore pixels are black.
pub fn save_mask_colored(path: &Path, mask: &SegmentationMask, m: usize) -> Result<()> {
    let palette = default_palette(m);
    let (h, w) = (mask.labels.shape()[0], mask.labels.shape()[1]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let l = mask.labels[(y, x)];
            let rgb = if l == mask.ignore_label || (l as usize) >= m {
                [0, 0, 0]
            } else {
                palette[l as usize]
            };
            out.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    out.save(path)?;
    Ok(())
}
