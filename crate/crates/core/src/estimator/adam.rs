use serde::{Deserialize, Serialize};

use super::tensor::Real;
use super::{EstimatorParams, Gradients};
use crate::error::{Error, Result};

/// Adam moments kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<T: Real>(params: &EstimatorParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step<T: Real>(
    state: &mut AdamState,
    params: &mut EstimatorParams<T>,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<()> {
    let names = params.tensor_names();
    assert_eq!(grads.tensors.len(), names.len(), "gradient tensor count mismatch");
    for (name, g) in names.iter().zip(&grads.tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for i in 0..p.len() {
            let gi = g[i].real_to_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let update = lr * mhat / (vhat.sqrt() + state.eps);
            p[i] = T::real_from_f64(p[i].real_to_f64() - update);
        }
    }
    Ok(())
}

/// Step-decay schedule: `base_lr * factor^(#decay epochs <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_epochs: vec![40, 50],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}
