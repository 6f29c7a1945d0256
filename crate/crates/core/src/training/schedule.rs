//! Linear warmup followed by linear decay to zero.

use crate::error::{Error, Result};

/// Number of warmup steps: `round(warmup_fraction * total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).round() as usize
}

/// Learning rate at `step` of `total_steps`.
///
/// Rises linearly from 0 to `base_lr` over the warmup steps, then falls
/// linearly back to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Config(format!("warmup_fraction {warmup_fraction} outside [0, 1)")));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} past the end of a {total_steps}-step schedule")));
    }
    let w = warmup_steps(total_steps, warmup_fraction);
    Ok(if step < w {
        base_lr * step as f64 / w as f64
    } else if w == total_steps {
        base_lr
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - w) as f64
    })
}
