//! Localization and classification metrics: CAM binarization, IoU/IoR
//! localization accuracy, point localization, and Mann-Whitney AUROC.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PylonError, Result};
use crate::tensor::Tensor4;

/// Axis-aligned box in pixel coordinates; `x`/`y` is the top-left corner and
/// the box covers columns `x..x+w`, rows `y..y+h` (exclusive ends).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Inclusive containment test used by point localization.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.w > 0
            && self.h > 0
            && col >= self.x
            && col <= self.x + self.w - 1
            && row >= self.y
            && row <= self.y + self.h - 1
    }
}

/// One evaluated instance: a CAM for one class of one image, plus its
/// ground-truth boxes.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub class: String,
    pub cam: Tensor4,
    pub boxes: Vec<BBox>,
}

/// Min-max normalize a single-plane CAM and threshold at 0.5. A flat CAM
/// (max == min) binarizes to all ones.
pub fn minmax_binarize(cam: &Tensor4) -> Result<Vec<bool>> {
    if cam.n != 1 || cam.c != 1 {
        return Err(PylonError::Metric(format!(
            "binarize expects a (1,1,h,w) plane, got {:?}",
            cam.shape()
        )));
    }
    if !cam.all_finite() {
        return Err(PylonError::Metric("binarize: CAM contains non-finite values".into()));
    }
    let min = cam.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cam.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![true; cam.data.len()]);
    }
    let range = max - min;
    Ok(cam.data.iter().map(|&v| (v - min) / range >= 0.5).collect())
}

/// IoU and IoR of a binary mask against the union of ground-truth boxes.
/// IoR divides the intersection by the predicted-region area.
pub fn iou_ior(mask: &[bool], h: usize, w: usize, boxes: &[BBox]) -> Result<(f64, f64)> {
    if mask.len() != h * w {
        return Err(PylonError::Metric(format!(
            "mask length {} does not match {h}x{w}",
            mask.len()
        )));
    }
    let mut gt = vec![false; h * w];
    for b in boxes {
        for row in b.y..(b.y + b.h).min(h) {
            for col in b.x..(b.x + b.w).min(w) {
                gt[row * w + col] = true;
            }
        }
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut pred = 0usize;
    for (m, g) in mask.iter().zip(&gt) {
        if *m && *g {
            inter += 1;
        }
        if *m || *g {
            union += 1;
        }
        if *m {
            pred += 1;
        }
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let ior = if pred == 0 { 0.0 } else { inter as f64 / pred as f64 };
    Ok((iou, ior))
}

/// Localization "hit" at threshold tau: IoU > tau OR IoR > tau (strict).
pub fn instance_hit(cam: &Tensor4, boxes: &[BBox], tau: f64) -> Result<bool> {
    let mask = minmax_binarize(cam)?;
    let (iou, ior) = iou_ior(&mask, cam.h, cam.w, boxes)?;
    Ok(iou > tau || ior > tau)
}

/// Point localization: the CAM argmax (first in row-major order on ties) must
/// fall inside any ground-truth box, with inclusive bounds.
pub fn point_hit(cam: &Tensor4, boxes: &[BBox]) -> Result<bool> {
    if cam.n != 1 || cam.c != 1 {
        return Err(PylonError::Metric(format!(
            "point localization expects a (1,1,h,w) plane, got {:?}",
            cam.shape()
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0usize;
    for (i, &v) in cam.data.iter().enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    let (row, col) = (best_idx / cam.w, best_idx % cam.w);
    Ok(boxes.iter().any(|b| b.contains(row, col)))
}

/// Mann-Whitney AUROC with ties counted as one half. Errors if either class
/// is empty.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(PylonError::Metric(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PylonError::Metric("auroc: non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PylonError::Metric(
            "auroc undefined: both classes must be present".into(),
        ));
    }
    // Average ranks over ties, then the rank-sum formula.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Per-class metric block at a fixed tau set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub n_instances: usize,
    /// Localization accuracy per tau, parallel to `taus` in the report.
    pub loc_acc: Vec<f64>,
    pub point_acc: f64,
    /// Per-image classification AUROC; absent when only one label value occurs.
    pub auroc: Option<f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub taus: Vec<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Instance-weighted localization accuracy per tau.
    pub weighted_loc_acc: Vec<f64>,
    pub weighted_point_acc: f64,
    /// Unweighted mean AUROC over classes that have one.
    pub macro_auroc: Option<f64>,
}

/// Classification scores for one class: per-image score and binary label.
#[derive(Debug, Clone, Default)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Aggregate localization instances and classification scores into a report.
/// `instances` carries one entry per annotated (image, class) pair;
/// `cls` maps class name -> per-image scores over the full eval set.
pub fn aggregate(
    instances: &[GtInstance],
    cls: &[(String, ClassScores)],
    taus: &[f64],
) -> Result<MetricsReport> {
    if taus.is_empty() {
        return Err(PylonError::Metric("at least one tau is required".into()));
    }
    let mut class_names: Vec<String> = Vec::new();
    for inst in instances {
        if !class_names.contains(&inst.class) {
            class_names.push(inst.class.clone());
        }
    }
    for (name, _) in cls {
        if !class_names.contains(name) {
            class_names.push(name.clone());
        }
    }

    let mut per_class = Vec::new();
    for name in &class_names {
        let mine: Vec<&GtInstance> = instances.iter().filter(|i| &i.class == name).collect();
        let mut loc_acc = Vec::new();
        for &tau in taus {
            let hits = mine
                .iter()
                .map(|i| instance_hit(&i.cam, &i.boxes, tau).map(usize::from))
                .sum::<Result<usize>>()?;
            loc_acc.push(if mine.is_empty() {
                0.0
            } else {
                hits as f64 / mine.len() as f64
            });
        }
        let point_hits = mine
            .iter()
            .map(|i| point_hit(&i.cam, &i.boxes).map(usize::from))
            .sum::<Result<usize>>()?;
        let point_acc = if mine.is_empty() {
            0.0
        } else {
            point_hits as f64 / mine.len() as f64
        };
        let scores = cls.iter().find(|(n, _)| n == name).map(|(_, s)| s);
        let (auroc_v, n_images) = match scores {
            Some(s) => {
                let both = s.labels.iter().any(|&l| l) && s.labels.iter().any(|&l| !l);
                (
                    if both { Some(auroc(&s.scores, &s.labels)?) } else { None },
                    s.scores.len(),
                )
            }
            None => (None, 0),
        };
        per_class.push(ClassMetrics {
            class: name.clone(),
            n_instances: mine.len(),
            loc_acc,
            point_acc,
            auroc: auroc_v,
            n_images,
        });
    }

    let total: usize = per_class.iter().map(|c| c.n_instances).sum();
    let weighted = |f: &dyn Fn(&ClassMetrics) -> f64| -> f64 {
        if total == 0 {
            0.0
        } else {
            per_class
                .iter()
                .map(|c| f(c) * c.n_instances as f64)
                .sum::<f64>()
                / total as f64
        }
    };
    let weighted_loc_acc = (0..taus.len())
        .map(|ti| weighted(&|c: &ClassMetrics| c.loc_acc[ti]))
        .collect();
    let weighted_point_acc = weighted(&|c: &ClassMetrics| c.point_acc);
    let with_auroc: Vec<f64> = per_class.iter().filter_map(|c| c.auroc).collect();
    let macro_auroc = if with_auroc.is_empty() {
        None
    } else {
        Some(with_auroc.iter().sum::<f64>() / with_auroc.len() as f64)
    };

    Ok(MetricsReport {
        taus: taus.to_vec(),
        per_class,
        weighted_loc_acc,
        weighted_point_acc,
        macro_auroc,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| PylonError::Metric(format!("report serialization: {e}")))
    }

    /// Flat CSV: one row per class plus a trailing `__weighted__` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,n_instances,n_images");
        for tau in &self.taus {
            out.push_str(&format!(",loc_acc@{tau}"));
        }
        out.push_str(",point_acc,auroc\n");
        let fmt_auroc = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
        for c in &self.per_class {
            out.push_str(&format!("{},{},{}", c.class, c.n_instances, c.n_images));
            for v in &c.loc_acc {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.6},{}\n", c.point_acc, fmt_auroc(c.auroc)));
        }
        let total: usize = self.per_class.iter().map(|c| c.n_instances).sum();
        let images: usize = self.per_class.iter().map(|c| c.n_images).max().unwrap_or(0);
        out.push_str(&format!("__weighted__,{total},{images}"));
        for v in &self.weighted_loc_acc {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{}\n",
            self.weighted_point_acc,
            fmt_auroc(self.macro_auroc)
        ));
        out
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let mut csv = std::fs::File::create(dir.join("metrics.csv"))?;
        csv.write_all(self.to_csv().as_bytes())?;
        let mut json = std::fs::File::create(dir.join("metrics.json"))?;
        json.write_all(self.to_json()?.as_bytes())?;
        json.write_all(b"\n")?;
        Ok(())
    }
}
