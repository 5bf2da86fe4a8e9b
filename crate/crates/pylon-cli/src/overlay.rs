//! CAM overlays: grayscale input alpha-blended with a baked colormap,
//! plus ground-truth box outlines.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use pylon_core::metrics::BBox;
use pylon_core::{PylonError, Result, Tensor4};

/// Fixed inferno-like gradient, interpolated from baked stops so overlay
/// bytes never depend on an external palette.
const STOPS: [(f64, [f64; 3]); 5] = [
    (0.00, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.50, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.00, [252.0, 255.0, 164.0]),
];

fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    for win in STOPS.windows(2) {
        let (t0, c0) = win[0];
        let (t1, c1) = win[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                c0[0] + (c1[0] - c0[0]) * f,
                c0[1] + (c1[1] - c0[1]) * f,
                c0[2] + (c1[2] - c0[2]) * f,
            ];
        }
    }
    STOPS[STOPS.len() - 1].1
}

/// Blend a grayscale image with its min-max-normalized CAM and draw box
/// outlines in green. Both tensors must be (1,1,h,w) of the same size.
pub fn render_overlay(image: &Tensor4, cam: &Tensor4, boxes: &[BBox]) -> Result<RgbImage> {
    if image.n != 1 || image.c != 1 || !image.same_shape(cam) {
        return Err(PylonError::Input(format!(
            "overlay expects matching (1,1,h,w) tensors, got {:?} and {:?}",
            image.shape(),
            cam.shape()
        )));
    }
    let (h, w) = (image.h, image.w);
    let min = cam.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cam.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if max > min { max - min } else { 1.0 };

    let mut out: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = image.at(0, 0, y, x).clamp(0.0, 1.0) * 255.0;
            let t = (cam.at(0, 0, y, x) - min) / range;
            let c = colormap(t);
            let px = [
                (0.5 * g + 0.5 * c[0]).round() as u8,
                (0.5 * g + 0.5 * c[1]).round() as u8,
                (0.5 * g + 0.5 * c[2]).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }

    let green = Rgb([0u8, 255, 0]);
    for b in boxes {
        if b.w == 0 || b.h == 0 {
            continue;
        }
        let x1 = (b.x + b.w - 1).min(w - 1);
        let y1 = (b.y + b.h - 1).min(h - 1);
        for x in b.x.min(w - 1)..=x1 {
            out.put_pixel(x as u32, b.y.min(h - 1) as u32, green);
            out.put_pixel(x as u32, y1 as u32, green);
        }
        for y in b.y.min(h - 1)..=y1 {
            out.put_pixel(b.x.min(w - 1) as u32, y as u32, green);
            out.put_pixel(x1 as u32, y as u32, green);
        }
    }
    Ok(out)
}

pub fn save_overlay(image: &Tensor4, cam: &Tensor4, boxes: &[BBox], path: &Path) -> Result<()> {
    let img = render_overlay(image, cam, boxes)?;
    img.save(path).map_err(|e| PylonError::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_monotone_red() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 4.0]);
        assert_eq!(colormap(1.0), [252.0, 255.0, 164.0]);
        let mut last = -1.0;
        for i in 0..=20 {
            let c = colormap(i as f64 / 20.0);
            assert!(c[0] >= last);
            last = c[0];
        }
    }

    #[test]
    fn overlay_draws_box_border() {
        let img = Tensor4::filled(1, 1, 8, 8, 0.0);
        let cam = Tensor4::filled(1, 1, 8, 8, 0.0);
        let b = BBox { x: 2, y: 2, w: 3, h: 3 };
        let o = render_overlay(&img, &cam, &[b]).unwrap();
        assert_eq!(*o.get_pixel(2, 2), Rgb([0, 255, 0]));
        assert_eq!(*o.get_pixel(4, 4), Rgb([0, 255, 0]));
        assert_ne!(*o.get_pixel(3, 3), Rgb([0, 255, 0]));
    }
}
