//! Top-k mixture-of-experts feed-forward layer.

use crate::error::Result;
use crate::numcore::{Graph, Scalar, Tensor, Var};

use super::params::{Binder, FfnIdx, StackIdx};

/// Routing decisions of one layer for `N` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace<T> {
    /// `[N, M_e]` softmax of the router logits.
    pub gate_probs: Tensor<T>,
    pub top_k: usize,
    /// `N * top_k` expert indices, best first.
    pub chosen: Vec<usize>,
    /// Gate probability of each chosen expert, not renormalized.
    pub weights: Vec<T>,
    /// Whether each chosen slot overflowed its expert's capacity.
    pub dropped: Vec<bool>,
}

impl<T: Scalar> RoutingTrace<T> {
    pub fn num_tokens(&self) -> usize {
        self.gate_probs.shape()[0]
    }

    pub fn dropped_slots(&self) -> usize {
        self.dropped.iter().filter(|&&d| d).count()
    }

    /// Tokens per expert that survived capacity limits.
    pub fn expert_load(&self) -> Vec<usize> {
        let mut load = vec![0; self.gate_probs.shape()[1]];
        for (e, d) in self.chosen.iter().zip(&self.dropped) {
            if !d {
                load[*e] += 1;
            }
        }
        load
    }
}

/// Tokens each expert may take: `ceil(capacity_factor * n * k / m)`.
pub fn capacity(capacity_factor: f64, n: usize, k: usize, m: usize) -> usize {
    (capacity_factor * (n * k) as f64 / m as f64).ceil() as usize
}

/// Indices of the `k` largest entries of `row`, largest first; equal values
/// go to the lower index.
pub fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn linear<T: Scalar>(g: &mut Graph<T>, bind: &mut Binder<'_, T>, x: Var, w: usize, b: usize) -> Result<Var> {
    let w = bind.var(g, w);
    let b = bind.var(g, b);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `d -> e/2 -> e -> d` with GELU after the first two projections.
pub fn stack_forward<T: Scalar>(g: &mut Graph<T>, bind: &mut Binder<'_, T>, s: &StackIdx, x: Var) -> Result<Var> {
    let h = linear(g, bind, x, s.w1, s.b1)?;
    let h = g.gelu(h)?;
    let h = linear(g, bind, h, s.w2, s.b2)?;
    let h = g.gelu(h)?;
    linear(g, bind, h, s.w3, s.b3)
}

/// Single shared stack of layer `layer` on `x: [N, d]`.
pub fn dense_ffn_forward<T: Scalar>(g: &mut Graph<T>, bind: &mut Binder<'_, T>, layer: usize, x: Var) -> Result<Var> {
    match &bind.layout().layers[layer].ffn {
        FfnIdx::Dense(s) => stack_forward(g, bind, s, x),
        FfnIdx::Moe { .. } => Err(crate::Error::Contract(format!("layer {layer} has no dense feed-forward block"))),
    }
}

#[derive(Clone, Debug)]
pub struct MoeOut<T> {
    /// `[N, d]`.
    pub y: Var,
    /// `[N, M_e]` gate probabilities on the graph.
    pub gate_probs: Var,
    pub trace: RoutingTrace<T>,
}

/// Routes each row of `x: [N, d]` to its top-k experts of layer `layer`.
///
/// With `training`, every expert takes at most [`capacity`] tokens, filled
/// in token order and then slot order; an overflowing slot contributes
/// nothing and the surviving weights are left as they are. Without
/// `training` capacity is unbounded, so each row's output is independent of
/// the other rows.
pub fn moe_forward<T: Scalar>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    layer: usize,
    x: Var,
    training: bool,
) -> Result<MoeOut<T>> {
    let cfg = bind.config();
    let (router, experts) = match &bind.layout().layers[layer].ffn {
        FfnIdx::Moe { router, experts } => (*router, experts),
        FfnIdx::Dense(_) => return Err(crate::Error::Contract(format!("layer {layer} has no experts"))),
    };
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let m = experts.len();
    let k = cfg.top_k;
    let r = bind.var(g, router);
    let logits = g.matmul(x, r)?;
    let gate_probs = g.softmax_lastdim(logits, None)?;
    let probs = g.value(gate_probs).clone();

    let cap = if training { capacity(cfg.capacity_factor, n, k, m) } else { usize::MAX };
    let mut load = vec![0usize; m];
    let mut chosen = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    let mut dropped = Vec::with_capacity(n * k);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (t, row) in probs.data().chunks(m).enumerate() {
        for e in top_k(row, k) {
            chosen.push(e);
            weights.push(row[e]);
            let over = load[e] >= cap;
            dropped.push(over);
            if !over {
                load[e] += 1;
                rows[e].push(t);
            }
        }
    }

    let mut parts = Vec::with_capacity(m);
    for (e, idx) in rows.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let xe = g.index_rows(x, &idx)?;
        let he = stack_forward(g, bind, &experts[e], xe)?;
        let flat: Vec<usize> = idx.iter().map(|&t| t * m + e).collect();
        let w = g.gather_entries(gate_probs, &flat)?;
        let w = g.reshape(w, &[idx.len(), 1])?;
        let ye = g.mul(he, w)?;
        parts.push((ye, idx));
    }
    let y = g.combine_rows(n, d, parts)?;
    Ok(MoeOut {
        y,
        gate_probs,
        trace: RoutingTrace {
            gate_probs: probs,
            top_k: k,
            chosen,
            weights,
            dropped,
        },
    })
}
