//! Central finite-difference gradients, the oracle for every backward kernel.

use super::Tensor4;
use crate::error::{PylonError, Result};

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per element.
/// `f` must be deterministic; non-finite evaluations abort.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor4) -> f64,
    x: &Tensor4,
    h: f64,
) -> Result<Tensor4> {
    if h <= 0.0 {
        return Err(PylonError::Config("finite differences: h must be > 0".into()));
    }
    let mut grad = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(PylonError::Numerical(format!(
                "finite differences: non-finite evaluation at element {i}"
            )));
        }
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
