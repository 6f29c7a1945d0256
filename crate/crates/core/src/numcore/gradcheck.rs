//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward function, so it shares
//! no code path with the backward rules it checks.

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Relative-error floor: differences are measured against
/// `max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Step used for element `x`: `1e-5 * (1 + |x|)`.
pub fn step_for(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            let h = step_for(x);
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i][j], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, j, analytic[i][j], numeric));
            }
        }
    }
    Ok(report)
}
