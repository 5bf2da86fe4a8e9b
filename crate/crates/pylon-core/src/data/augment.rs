//! Train-time augmentations: horizontal flip, random resized crop,
//! random rotation and brightness/contrast jitter.

use rand::Rng;

use super::imageio::resize_bicubic;
use crate::error::{PylonError, Result};
use crate::tensor::Tensor4;

/// One sampled set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Retained area fraction of the random resized crop.
    pub crop_scale: f64,
    /// Crop offset as a fraction of the slack in each axis.
    pub crop_fy: f64,
    pub crop_fx: f64,
    /// Rotation in degrees.
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    /// Parameters that make `augment_with` the identity.
    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            crop_scale: 1.0,
            crop_fy: 0.0,
            crop_fx: 0.0,
            angle_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// Draw augmentation parameters with the reference ranges: crop area in
/// [0.7, 1.0], rotation within +/-90 degrees, brightness/contrast +/-0.5.
pub fn sample_draw<R: Rng>(rng: &mut R) -> AugmentDraw {
    AugmentDraw {
        flip: rng.gen_bool(0.5),
        crop_scale: rng.gen_range(0.7..=1.0),
        crop_fy: rng.gen_range(0.0..=1.0),
        crop_fx: rng.gen_range(0.0..=1.0),
        angle_deg: rng.gen_range(-90.0..=90.0),
        brightness: rng.gen_range(-0.5..=0.5),
        contrast: rng.gen_range(-0.5..=0.5),
    }
}

fn hflip(t: &Tensor4) -> Tensor4 {
    let mut out = t.clone();
    let (n, c, h, w) = t.shape();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y, w - 1 - x);
                }
            }
        }
    }
    out
}

fn crop_resize(t: &Tensor4, draw: &AugmentDraw) -> Result<Tensor4> {
    let (n, c, h, w) = t.shape();
    let side_h = ((h as f64) * draw.crop_scale.sqrt()).round() as usize;
    let side_w = ((w as f64) * draw.crop_scale.sqrt()).round() as usize;
    let side_h = side_h.clamp(1, h);
    let side_w = side_w.clamp(1, w);
    if side_h == h && side_w == w {
        return Ok(t.clone());
    }
    let top = ((h - side_h) as f64 * draw.crop_fy).round() as usize;
    let left = ((w - side_w) as f64 * draw.crop_fx).round() as usize;
    let mut crop = Tensor4::zeros(n, c, side_h, side_w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..side_h {
                for x in 0..side_w {
                    *crop.at_mut(ni, ci, y, x) = t.at(ni, ci, top + y, left + x);
                }
            }
        }
    }
    resize_bicubic(&crop, h, w)
}

/// Rotate about the image center with bilinear resampling; exposed corners
/// become zero. A zero angle is an exact identity.
fn rotate(t: &Tensor4, angle_deg: f64) -> Tensor4 {
    if angle_deg == 0.0 {
        return t.clone();
    }
    let (n, c, h, w) = t.shape();
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // inverse mapping: rotate the destination point back
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let sy = cos * dy + sin * dx + cy;
                    let sx = -sin * dy + cos * dx + cx;
                    let y0 = sy.floor() as isize;
                    let x0 = sx.floor() as isize;
                    let fy = sy - y0 as f64;
                    let fx = sx - x0 as f64;
                    let mut acc = 0.0;
                    for (ky, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                        if !(0..h as isize).contains(&ky) || wy == 0.0 {
                            continue;
                        }
                        for (kx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                            if !(0..w as isize).contains(&kx) || wx == 0.0 {
                                continue;
                            }
                            acc += t.at(ni, ci, ky as usize, kx as usize) * wy * wx;
                        }
                    }
                    *out.at_mut(ni, ci, y, x) = acc;
                }
            }
        }
    }
    out
}

fn jitter(t: &Tensor4, brightness: f64, contrast: f64) -> Tensor4 {
    if brightness == 0.0 && contrast == 0.0 {
        return t.clone();
    }
    t.map(|v| ((v - 0.5) * (1.0 + contrast) + 0.5 + brightness).clamp(0.0, 1.0))
}

/// Apply one full augmentation pipeline with explicit parameters.
pub fn augment_with(image: &Tensor4, draw: &AugmentDraw) -> Result<Tensor4> {
    if !(0.0..=1.0).contains(&draw.crop_scale.sqrt()) && draw.crop_scale > 1.0 {
        return Err(PylonError::Input(format!(
            "crop scale {} out of range",
            draw.crop_scale
        )));
    }
    let mut out = if draw.flip { hflip(image) } else { image.clone() };
    out = crop_resize(&out, draw)?;
    out = rotate(&out, draw.angle_deg);
    Ok(jitter(&out, draw.brightness, draw.contrast))
}

/// Apply a randomly drawn augmentation from the given stream.
pub fn augment<R: Rng>(image: &Tensor4, rng: &mut R) -> Result<Tensor4> {
    let draw = sample_draw(rng);
    augment_with(image, &draw)
}
