//! Central finite-difference verification of backward passes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter (all coordinates if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-3,
            coords_per_param: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Names of parameters whose error exceeds `tol`.
    pub flagged: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `model_fn` against
/// `(f(θ+h) − f(θ−h)) / 2h` on a random subsample of coordinates.
///
/// `model_fn` must return the loss together with its gradients.
pub fn grad_check<F>(params: &mut ParamStore<f64>, model_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
{
    let (loss0, analytic) = model_fn(params)?;
    let (loss1, _) = model_fn(params)?;
    if loss0.to_bits() != loss1.to_bits() {
        return Err(Error::Numerical(format!(
            "non-deterministic loss: {loss0} then {loss1}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let n = params.by_index(idx).1.value.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &k in &coords {
            let orig = params.by_index(idx).1.value.data()[k];
            params.by_index_mut(idx).1.value.data_mut()[k] = orig + cfg.h;
            let up = model_fn(params).map(|r| r.0);
            params.by_index_mut(idx).1.value.data_mut()[k] = orig - cfg.h;
            let down = model_fn(params).map(|r| r.0);
            params.by_index_mut(idx).1.value.data_mut()[k] = orig;
            let numeric = (up? - down?) / (2.0 * cfg.h);
            let a = analytic.get(idx).map_or(0.0, |g| g[k]);
            worst = worst.max(rel_err(a, numeric));
        }
        checks.push(ParamCheck {
            name: params.by_index(idx).0.to_string(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let flagged = checks
        .iter()
        .filter(|c| c.max_rel_err >= cfg.tol)
        .map(|c| c.name.clone())
        .collect();
    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        tol: cfg.tol,
        flagged,
    })
}
