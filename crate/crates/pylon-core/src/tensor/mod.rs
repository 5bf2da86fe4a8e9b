//! Dense 4-D tensors and the fixed differentiable operator set.

mod adam;
mod fd;
pub mod graph;
pub mod ops;

pub use adam::{adam_step, AdamState, Param};
pub use fd::finite_difference_gradient;

use rand::Rng;

use crate::error::{PylonError, Result};

/// Dense (batch, channel, height, width) grid of f64 values, row-major.
///
/// All feature maps, weights and heatmaps are carried in this one type.
/// Per-channel vectors (biases, norm affines) use shape (1, c, 1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f64) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(PylonError::Dimension(format!(
                "value count {} does not match shape ({n},{c},{h},{w})",
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    /// Per-channel vector as a (1, c, 1, 1) tensor.
    pub fn channel_vec(values: Vec<f64>) -> Self {
        let c = values.len();
        Tensor4 {
            n: 1,
            c,
            h: 1,
            w: 1,
            data: values,
        }
    }

    pub fn random<R: Rng>(n: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4 { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous row slice (fixed n, c, y).
    #[inline]
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[f64] {
        let start = self.idx(n, c, y, 0);
        &self.data[start..start + self.w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Tensor4) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in mean_abs_diff");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / self.data.len() as f64
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        assert!(self.same_shape(other), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// One sample's channel plane as a flat (h*w) slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = self.idx(n, c, 0, 0);
        &self.data[start..start + self.h * self.w]
    }
}
