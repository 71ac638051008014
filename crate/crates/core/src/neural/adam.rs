//! Adam with bias correction. Moment buffers live in the [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One update at step `t` (1-based). Frozen parameters are skipped.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let bc1 = one - T::of(cfg.beta1.powi(t as i32));
    let bc2 = one - T::of(cfg.beta2.powi(t as i32));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let grad = p
            .value
            .grad()
            .ok_or_else(|| Error::Numerical(format!("missing gradient for parameter '{name}'")))?
            .to_vec();
        let m = p.adam_m.get_or_insert_with(|| vec![T::zero(); n]);
        let v = p.adam_v.get_or_insert_with(|| vec![T::zero(); n]);
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
