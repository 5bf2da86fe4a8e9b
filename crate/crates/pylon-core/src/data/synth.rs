//! Synthetic multi-label localization dataset: blobs of very different
//! scales on a structured noisy background, with exact bounding boxes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::imageio::save_png_gray;
use super::{split, DatasetManifest, ManifestRecord, Split, DEFAULT_SPLIT};
use crate::error::{PylonError, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    /// Uniform-intensity disk.
    Disk,
    /// Gaussian profile truncated at its support radius (exact support).
    GaussianBlob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    /// Blob support as a fraction of total image area, sampled uniformly.
    pub area_range: (f64, f64),
    pub kind: BlobKind,
    /// Peak intensity added over the background, sampled uniformly.
    pub intensity_range: (f64, f64),
    /// Probability the class appears in an image.
    pub prevalence: f64,
}

/// Unlabeled nuisance blobs. They share the class blobs' shapes but are
/// never recorded in labels or boxes, so telling them apart from a real
/// class requires the absolute intensity cue rather than shape alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistractorConfig {
    /// Probability of each candidate distractor appearing in an image.
    pub prevalence: f64,
    pub area_range: (f64, f64),
    pub kind: BlobKind,
    pub intensity_range: (f64, f64),
    /// Number of independent candidates per image.
    pub max_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub classes: Vec<SynthClass>,
    #[serde(default)]
    pub distractors: Option<DistractorConfig>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_images: 128,
            image_size: 64,
            classes: vec![
                SynthClass {
                    name: "big".into(),
                    area_range: (0.12, 0.20),
                    kind: BlobKind::Disk,
                    intensity_range: (0.25, 0.45),
                    prevalence: 0.5,
                },
                SynthClass {
                    name: "small".into(),
                    area_range: (0.002, 0.01),
                    kind: BlobKind::Disk,
                    intensity_range: (0.25, 0.45),
                    prevalence: 0.5,
                },
            ],
            distractors: None,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.image_size == 0 {
            return Err(PylonError::Config("n_images and image_size must be positive".into()));
        }
        for c in &self.classes {
            self.check_blob(&c.name, c.area_range, c.prevalence)?;
        }
        if let Some(d) = &self.distractors {
            if d.max_count == 0 {
                return Err(PylonError::Config("distractor max_count must be positive".into()));
            }
            self.check_blob("distractor", d.area_range, d.prevalence)?;
        }
        Ok(())
    }

    fn check_blob(&self, name: &str, area_range: (f64, f64), prevalence: f64) -> Result<()> {
        let (lo, hi) = area_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(PylonError::Config(format!(
                "{name}: area range ({lo}, {hi}) must lie in (0,1)"
            )));
        }
        if !(prevalence > 0.0 && prevalence <= 1.0) {
            return Err(PylonError::Config(format!(
                "{name}: prevalence {prevalence} must be in (0,1]"
            )));
        }
        // A blob must fit inside the image with its full support.
        let r_max = ((hi * (self.image_size * self.image_size) as f64)
            / std::f64::consts::PI)
            .sqrt();
        if 2.0 * r_max + 1.0 > self.image_size as f64 {
            return Err(PylonError::Config(format!(
                "{name}: largest blob (radius {r_max:.1}) exceeds a {} px image",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Additive contribution of one blob; support is exactly `dist <= r`.
fn blob_value(kind: BlobKind, dist: f64, r: f64, intensity: f64) -> f64 {
    if dist > r {
        return 0.0;
    }
    match kind {
        BlobKind::Disk => intensity,
        BlobKind::GaussianBlob => {
            let sigma = r / 2.0;
            intensity * (-dist * dist / (2.0 * sigma * sigma)).exp()
        }
    }
}

/// Place one blob at a uniform position with its full support inside the
/// image; returns the tight box over the pixels it actually touched.
fn draw_blob(
    img: &mut Tensor4,
    rng: &mut ChaCha20Rng,
    kind: BlobKind,
    area_range: (f64, f64),
    intensity_range: (f64, f64),
) -> Option<BBox> {
    let s = img.h;
    let area = rng.gen_range(area_range.0..=area_range.1) * (s * s) as f64;
    let r = (area / std::f64::consts::PI).sqrt();
    let intensity = rng.gen_range(intensity_range.0..=intensity_range.1);
    let margin = r.ceil() as usize;
    let cy = rng.gen_range(margin..s - margin) as f64;
    let cx = rng.gen_range(margin..s - margin) as f64;

    let (mut x0, mut x1, mut y0, mut y1) = (s, 0usize, s, 0usize);
    for y in 0..s {
        for x in 0..s {
            let dist = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let v = blob_value(kind, dist, r, intensity);
            if v > 0.0 {
                *img.at_mut(0, 0, y, x) += v;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    (x1 >= x0).then(|| BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// One generated image plus its per-class boxes (class index, box).
pub(crate) struct SynthImage {
    pub image: Tensor4,
    pub boxes: Vec<(usize, BBox)>,
}

pub(crate) fn render_image(cfg: &SyntheticConfig, rng: &mut ChaCha20Rng) -> SynthImage {
    let s = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std).expect("valid noise std");

    // Background: mid-gray + a smooth low-frequency field + Gaussian noise.
    let mut img = Tensor4::zeros(1, 1, s, s);
    let n_waves = 3;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0) / s as f64,
                rng.gen_range(0.5..2.0) / s as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    for y in 0..s {
        for x in 0..s {
            let mut v = 0.5;
            for &(fy, fx, phase, amp) in &waves {
                v += amp
                    * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
            }
            *img.at_mut(0, 0, y, x) = v;
        }
    }

    let mut boxes = Vec::new();
    for (ci, class) in cfg.classes.iter().enumerate() {
        if !rng.gen_bool(class.prevalence) {
            continue;
        }
        if let Some(b) =
            draw_blob(&mut img, rng, class.kind, class.area_range, class.intensity_range)
        {
            boxes.push((ci, b));
        }
    }
    if let Some(d) = &cfg.distractors {
        for _ in 0..d.max_count {
            if rng.gen_bool(d.prevalence) {
                // Drawn but deliberately unrecorded: no label, no box.
                draw_blob(&mut img, rng, d.kind, d.area_range, d.intensity_range);
            }
        }
    }

    for v in &mut img.data {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        // Snap to the 8-bit grid so in-memory tensors equal reloaded PNGs.
        *v = (*v * 255.0).round() / 255.0;
    }
    SynthImage { image: img, boxes }
}

/// Generate the dataset under `out_dir`: `images/*.png`, `manifest.csv` and
/// `bboxes.csv`. Deterministic per (config, seed) down to file bytes.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let classes: Vec<String> = cfg.classes.iter().map(|c| c.name.clone()).collect();
    let mut records = Vec::with_capacity(cfg.n_images);
    let mut boxes: BTreeMap<(String, String), Vec<BBox>> = BTreeMap::new();

    for i in 0..cfg.n_images {
        // Independent per-image stream: parallel-friendly and stable under
        // changes to n_images.
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let rendered = render_image(cfg, &mut rng);

        let id = format!("img_{i:05}");
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        save_png_gray(&rendered.image, &out_dir.join(&rel))?;

        let labels: Vec<String> = rendered
            .boxes
            .iter()
            .map(|(ci, _)| classes[*ci].clone())
            .collect();
        for (ci, b) in &rendered.boxes {
            boxes
                .entry((id.clone(), classes[*ci].clone()))
                .or_default()
                .push(*b);
        }
        records.push(ManifestRecord {
            image_path: rel,
            split: Split::Train,
            labels,
        });
    }

    let manifest = DatasetManifest {
        classes,
        records,
        boxes,
    };
    let manifest = split(&manifest, DEFAULT_SPLIT, cfg.seed)?;
    manifest.write_csv(out_dir)?;
    Ok(manifest)
}
