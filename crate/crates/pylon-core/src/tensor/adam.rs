//! Parameters and the Adam optimizer (bias-corrected, no weight decay).

use super::Tensor4;
use crate::error::{PylonError, Result};

/// A named trainable tensor with an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.n, value.c, value.h, value.w);
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// First/second moment state for a parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Param], lr: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over all params. Step count advances by exactly 1.
pub fn adam_step(params: &mut [Param], state: &mut AdamState) -> Result<()> {
    if !(0.0..1.0).contains(&state.beta1) || !(0.0..1.0).contains(&state.beta2) {
        return Err(PylonError::Config("adam: beta1, beta2 must lie in (0,1)".into()));
    }
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(PylonError::Optimizer {
                name: p.name.clone(),
                reason: "non-finite gradient".into(),
            });
        }
    }
    state.step = state
        .step
        .checked_add(1)
        .ok_or_else(|| PylonError::Optimizer {
            name: "<state>".into(),
            reason: "step counter overflow".into(),
        })?;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((pv, &g), (mv, vv)) in p
            .value
            .data
            .iter_mut()
            .zip(&p.grad.data)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * g;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * g * g;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
