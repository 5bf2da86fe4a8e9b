//! 8-bit grayscale PNG I/O and bicubic (Catmull-Rom) resizing.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use super::ingestion;
use crate::error::{PylonError, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor4;

/// Load an 8-bit grayscale PNG as a (1, 1, h, w) tensor scaled to [0, 1].
pub fn load_png_gray(path: &Path) -> Result<Tensor4> {
    let img = image::open(path).map_err(|e| ingestion(path, &e.to_string()))?;
    let gray: GrayImage = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = gray.dimensions();
    let data = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Tensor4::from_vec(1, 1, h as usize, w as usize, data)
}

/// Write a (1, 1, h, w) tensor in [0, 1] as an 8-bit grayscale PNG.
pub fn save_png_gray(t: &Tensor4, path: &Path) -> Result<()> {
    if t.n != 1 || t.c != 1 {
        return Err(PylonError::Input(format!(
            "save_png_gray expects (1,1,h,w), got {:?}",
            t.shape()
        )));
    }
    let buf: Vec<u8> = t
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: GrayImage =
        ImageBuffer::<Luma<u8>, _>::from_raw(t.w as u32, t.h as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| ingestion(path, &e.to_string()))
}

/// Catmull-Rom kernel (bicubic with a = -0.5).
fn cubic(a: f64, t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_taps(dst: usize, src_size: usize, dst_size: usize) -> ([usize; 4], [f64; 4]) {
    let s = (dst as f64 + 0.5) * (src_size as f64 / dst_size as f64) - 0.5;
    let s0 = s.floor();
    let frac = s - s0;
    let base = s0 as isize - 1;
    let mut idx = [0usize; 4];
    let mut wgt = [0.0f64; 4];
    for k in 0..4 {
        idx[k] = (base + k as isize).clamp(0, src_size as isize - 1) as usize;
        wgt[k] = cubic(-0.5, frac - (k as f64 - 1.0));
    }
    // Clamped-edge taps can leave the weights off unit sum; renormalize.
    let sum: f64 = wgt.iter().sum();
    for w in &mut wgt {
        *w /= sum;
    }
    (idx, wgt)
}

/// Bicubic resize with half-pixel centers and clamped edges. Same-size
/// targets return the input unchanged.
pub fn resize_bicubic(input: &Tensor4, th: usize, tw: usize) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    if th == 0 || tw == 0 {
        return Err(PylonError::Config("resize target must be positive".into()));
    }
    if th == h && tw == w {
        return Ok(input.clone());
    }
    let ys: Vec<_> = (0..th).map(|y| cubic_taps(y, h, th)).collect();
    let xs: Vec<_> = (0..tw).map(|x| cubic_taps(x, w, tw)).collect();
    let mut out = Tensor4::zeros(n, c, th, tw);
    for ni in 0..n {
        for ci in 0..c {
            for (dy, (yi, yw)) in ys.iter().enumerate() {
                for (dx, (xi, xw)) in xs.iter().enumerate() {
                    let mut acc = 0.0;
                    for ky in 0..4 {
                        let row = input.row(ni, ci, yi[ky]);
                        let mut racc = 0.0;
                        for kx in 0..4 {
                            racc += row[xi[kx]] * xw[kx];
                        }
                        acc += racc * yw[ky];
                    }
                    *out.at_mut(ni, ci, dy, dx) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Rescale a pixel box by independent (sx, sy) spatial factors.
pub fn rescale_box(b: &BBox, sx: f64, sy: f64) -> BBox {
    BBox {
        x: (b.x as f64 * sx).round() as usize,
        y: (b.y as f64 * sy).round() as usize,
        w: (b.w as f64 * sx).round() as usize,
        h: (b.h as f64 * sy).round() as usize,
    }
}

/// Load a grayscale PNG and bicubic-resize it to `target_size` square.
/// Returns the image plus the (sx, sy) factors to apply to its boxes.
pub fn load_image(path: &Path, target_size: usize) -> Result<(Tensor4, f64, f64)> {
    let img = load_png_gray(path)?;
    let sx = target_size as f64 / img.w as f64;
    let sy = target_size as f64 / img.h as f64;
    let resized = resize_bicubic(&img, target_size, target_size)?;
    Ok((resized, sx, sy))
}
