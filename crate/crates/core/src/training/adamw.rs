//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numcore::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Moment buffers, one per parameter tensor and shaped like it.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Fails on the first non-finite gradient, naming its parameter.
pub fn check_grads<T: Scalar>(params: &ModelParams<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if let Some(j) = g.iter().position(|x| !x.as_f64().is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at element {j}", params.name(i))));
            }
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm` and
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// One update. Parameters without a gradient are left untouched,
/// including their weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Option<Vec<T>>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    check_grads(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2, eps) = (c(cfg.beta1), c(cfg.beta2), c(cfg.eps));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let decay = c(1.0 - lr * cfg.weight_decay);
    let step_size = c(lr / bc1);
    let inv_bc2 = c(1.0 / bc2);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let denom = (v[j] * inv_bc2).sqrt() + eps;
            p[j] = p[j] * decay - step_size * m[j] / denom;
        }
    }
    Ok(())
}
