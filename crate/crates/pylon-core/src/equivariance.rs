//! Shift-equivariance auditing: measure how each traced feature map moves
//! when the input moves, and flag stages that behave globally.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PylonError, Result};
use crate::models::{Mode, Model};
use crate::tensor::ops::PadMode;
use crate::tensor::Tensor4;

/// How shifted-out content is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Content wraps around the opposite border (exact group action).
    Circular,
    /// Vacated pixels become zero (content actually changes).
    Zeros,
}

/// Translate a tensor by (dy, dx): output(y, x) = input(y - dy, x - dx).
/// Positive shifts move content down/right. |dy| and |dx| must be smaller
/// than the spatial extent.
pub fn shift(input: &Tensor4, dy: isize, dx: isize, mode: ShiftMode) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    if dy.unsigned_abs() >= h || dx.unsigned_abs() >= w {
        return Err(PylonError::Input(format!(
            "shift ({dy},{dx}) out of range for {h}x{w}"
        )));
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize - dy;
                    let sx = x as isize - dx;
                    let v = match mode {
                        ShiftMode::Circular => input.at(
                            ni,
                            ci,
                            sy.rem_euclid(h as isize) as usize,
                            sx.rem_euclid(w as isize) as usize,
                        ),
                        ShiftMode::Zeros => {
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                0.0
                            } else {
                                input.at(ni, ci, sy as usize, sx as usize)
                            }
                        }
                    };
                    *out.at_mut(ni, ci, y, x) = v;
                }
            }
        }
    }
    Ok(out)
}

/// Max abs difference over the interior, ignoring `margin` pixels per border.
fn interior_max_diff(a: &Tensor4, b: &Tensor4, margin: usize) -> f64 {
    debug_assert!(a.same_shape(b));
    let (n, c, h, w) = a.shape();
    if 2 * margin >= h || 2 * margin >= w {
        return 0.0;
    }
    let mut m = 0.0f64;
    for ni in 0..n {
        for ci in 0..c {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    m = m.max((a.at(ni, ci, y, x) - b.at(ni, ci, y, x)).abs());
                }
            }
        }
    }
    m
}

/// Equivariance error of `f` (an image -> feature-map function with output
/// stride `stride`) under a (dy, dx) input shift. The shift must be a
/// multiple of the stride. In zeros mode the comparison skips an interior
/// margin of `margin` feature-map pixels per border (boundary effects are
/// real content changes, not equivariance failures).
pub fn equivariance_error(
    f: &mut dyn FnMut(&Tensor4) -> Result<Tensor4>,
    input: &Tensor4,
    dy: isize,
    dx: isize,
    mode: ShiftMode,
    stride: usize,
    margin: usize,
) -> Result<f64> {
    let s = stride as isize;
    if dy % s != 0 || dx % s != 0 {
        return Err(PylonError::Input(format!(
            "shift ({dy},{dx}) is not a multiple of stride {stride}"
        )));
    }
    let base = f(input)?;
    let moved = f(&shift(input, dy, dx, mode)?)?;
    if !base.same_shape(&moved) {
        return Err(PylonError::Dimension(
            "equivariance_error: output shape changed under shift".into(),
        ));
    }
    let expected = shift(&base, dy / s, dx / s, mode)?;
    let margin = match mode {
        ShiftMode::Circular => 0,
        ShiftMode::Zeros => {
            margin + (dy.unsigned_abs() / stride).max(dx.unsigned_abs() / stride)
        }
    };
    Ok(interior_max_diff(&moved, &expected, margin))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Input-pixel shifts to try; each must divide by every audited stride,
    /// so multiples of 32 are the useful choices.
    pub shifts: Vec<(isize, isize)>,
    pub mode: ShiftMode,
    /// Interior margin (input pixels) excluded in zeros mode.
    pub margin_px: usize,
    /// A spatial node whose output moves less than this under every shift is
    /// reported as shift-invariant (resolution lost to a global path).
    pub invariance_tol: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            shifts: vec![(32, 0), (0, 32), (32, 32)],
            mode: ShiftMode::Circular,
            margin_px: 0,
            invariance_tol: 1e-6,
        }
    }
}

/// Per-node audit row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeAudit {
    pub node: String,
    pub stride: usize,
    /// Worst interior deviation from the ideally-shifted feature map.
    pub equivariance_err: f64,
    /// Worst interior change of the feature map itself under the shift.
    pub response_to_shift: f64,
    /// Largest within-plane deviation from the plane mean; ~0 means the map
    /// is a spatially uniform broadcast.
    pub spatial_variation: f64,
    /// True when a spatial map ignored every input shift, or is a uniform
    /// per-channel broadcast: a global stage that cannot carry localization.
    pub flagged_invariant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub mode: ShiftMode,
    pub shifts: Vec<(isize, isize)>,
    pub nodes: Vec<NodeAudit>,
}

impl EquivarianceReport {
    pub fn max_equivariance_err(&self) -> f64 {
        self.nodes
            .iter()
            .fold(0.0f64, |m, n| m.max(n.equivariance_err))
    }

    pub fn node(&self, name: &str) -> Option<&NodeAudit> {
        self.nodes.iter().find(|n| n.node == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "node,stride,equivariance_err,response_to_shift,spatial_variation,flagged_invariant\n",
        );
        for n in &self.nodes {
            out.push_str(&format!(
                "{},{},{:.12e},{:.12e},{:.12e},{}\n",
                n.node,
                n.stride,
                n.equivariance_err,
                n.response_to_shift,
                n.spatial_variation,
                n.flagged_invariant
            ));
        }
        out
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let mut csv = std::fs::File::create(dir.join("report.csv"))?;
        csv.write_all(self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| PylonError::Config(format!("report serialization: {e}")))?;
        let mut jf = std::fs::File::create(dir.join("report.json"))?;
        jf.write_all(json.as_bytes())?;
        jf.write_all(b"\n")?;
        Ok(())
    }
}

/// Largest deviation of any value from its plane mean, over all (n, c).
fn max_plane_deviation(t: &Tensor4) -> f64 {
    let mut m = 0.0f64;
    for ni in 0..t.n {
        for ci in 0..t.c {
            let plane = t.plane(ni, ci);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            for &v in plane {
                m = m.max((v - mean).abs());
            }
        }
    }
    m
}

/// Audit every traced node of a model on one input batch.
pub fn audit_model(model: &Model, input: &Tensor4, cfg: &AuditConfig) -> Result<EquivarianceReport> {
    if cfg.shifts.is_empty() {
        return Err(PylonError::Config("audit: at least one shift required".into()));
    }
    let base = model.forward_pass(input, Mode::Eval)?;
    let names: Vec<(String, usize)> = base
        .traced
        .iter()
        .map(|t| (t.name.clone(), t.stride))
        .collect();
    let mut rows: Vec<NodeAudit> = names
        .iter()
        .map(|(name, stride)| NodeAudit {
            node: name.clone(),
            stride: *stride,
            equivariance_err: 0.0,
            response_to_shift: 0.0,
            spatial_variation: 0.0,
            flagged_invariant: false,
        })
        .collect();

    for &(dy, dx) in &cfg.shifts {
        let moved = model.forward_pass(&shift(input, dy, dx, cfg.mode)?, Mode::Eval)?;
        for (row, t) in rows.iter_mut().zip(&base.traced) {
            let s = t.stride as isize;
            if dy % s != 0 || dx % s != 0 {
                return Err(PylonError::Input(format!(
                    "shift ({dy},{dx}) is not a multiple of stride {} at node {}",
                    t.stride, t.name
                )));
            }
            let a = base.graph.value(t.id);
            let mt = moved
                .traced
                .iter()
                .find(|m| m.name == t.name)
                .expect("trace is stable across calls");
            let b = moved.graph.value(mt.id);
            let expected = shift(a, dy / s, dx / s, cfg.mode)?;
            let margin = match cfg.mode {
                ShiftMode::Circular => 0,
                ShiftMode::Zeros => {
                    cfg.margin_px / t.stride
                        + (dy.unsigned_abs() / t.stride).max(dx.unsigned_abs() / t.stride)
                }
            };
            row.equivariance_err = row.equivariance_err.max(interior_max_diff(b, &expected, margin));
            // Whether the map responded at all is a full-frame question.
            row.response_to_shift = row.response_to_shift.max(interior_max_diff(b, a, 0));
        }
    }

    for (row, t) in rows.iter_mut().zip(&base.traced) {
        let v = base.graph.value(t.id);
        let spatial = v.h > 1 || v.w > 1;
        row.spatial_variation = max_plane_deviation(v);
        row.flagged_invariant = spatial
            && (row.response_to_shift <= cfg.invariance_tol
                || row.spatial_variation <= cfg.invariance_tol);
    }

    Ok(EquivarianceReport {
        mode: cfg.mode,
        shifts: cfg.shifts.clone(),
        nodes: rows,
    })
}

/// Convenience: a circular-pad model audited with circular shifts should be
/// equivariant to machine precision at every stage.
pub fn is_circular_build(model: &Model) -> bool {
    model.pad_mode == PadMode::Circular
}
