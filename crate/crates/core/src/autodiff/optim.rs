use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real};
use crate::error::{shape_err, Error, Result};

/// Adam learning rate used when a run does not set one.
pub const DEFAULT_LR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every trainable tensor in `store`.
/// Frozen tensors are skipped; a trainable tensor without a gradient is an error.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    let ids = store.trainable_ids();
    for &id in &ids {
        if store.get(id).grad().is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let bc1 = T::one() - T::c(libm::pow(cfg.beta1, t as f64));
    let bc2 = T::one() - T::c(libm::pow(cfg.beta2, t as f64));
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.eps);
    for id in ids {
        let n = store.get(id).numel();
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        if m.len() != n {
            return Err(shape_err("adam_step", "moment shape mismatch".into()));
        }
        let (data, grad) = store.get_mut(id).parts_mut();
        let grad = grad.expect("checked above");
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            data[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
