//! Training objective: masked token cross-entropy plus the expert
//! load-balancing penalty.
//!
//! Token loss is averaged over the positions the mask keeps, so padding
//! never dilutes it. The load penalty of several layers is their mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encoder_forward, nar_head, Binder, EncoderOut};
use crate::numcore::{Graph, Scalar, Var};
use crate::tokenizer::{Batch, EOS};

pub use crate::model::EosMaskPolicy;

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_BETA: f64 = 0.2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub token_loss: f64,
    pub load_loss: f64,
    pub total: f64,
    pub masked_token_count: usize,
    pub per_layer_load: Vec<f64>,
}

fn first_eos(row: &[usize]) -> Option<usize> {
    row.iter().position(|&i| i == EOS)
}

/// Loss mask `[B, T]` for `batch` under `policy`.
///
/// `predicted` holds argmax ids `[B, T]` and is required by the
/// `Predicted` and `Union` policies; a row with no predicted EOS keeps
/// every position.
pub fn eos_loss_mask(batch: &Batch, predicted: Option<&[usize]>, policy: EosMaskPolicy) -> Result<Vec<bool>> {
    let t = batch.seq_len;
    let mut mask = Vec::with_capacity(batch.batch_size * t);
    for (b, row) in batch.tgt_ids.chunks(t).enumerate() {
        let target_end =
            first_eos(row).ok_or_else(|| Error::Data(format!("target row {b} has no EOS")))?;
        let predicted_end = match policy {
            EosMaskPolicy::Target => None,
            _ => {
                let p = predicted
                    .ok_or_else(|| Error::Contract(format!("{policy:?} EOS masking needs predicted ids")))?;
                if p.len() != batch.tgt_ids.len() {
                    return Err(Error::dim("eos_loss_mask", &[batch.batch_size, t], &[p.len()]));
                }
                Some(first_eos(&p[b * t..(b + 1) * t]).unwrap_or(t - 1))
            }
        };
        let end = match (policy, predicted_end) {
            (EosMaskPolicy::Target, _) => target_end,
            (EosMaskPolicy::Predicted, Some(p)) => p,
            (EosMaskPolicy::Union, Some(p)) => p.max(target_end),
            _ => unreachable!(),
        };
        mask.extend((0..t).map(|i| i <= end));
    }
    Ok(mask)
}

/// Mean cross-entropy of `logits: [.., V]` against `targets` over the
/// positions where `mask` is true. Returns the loss and the kept count.
pub fn token_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(Var, usize)> {
    let s = g.shape(logits).to_vec();
    let v = *s.last().ok_or_else(|| Error::Contract("logits must have a vocabulary dimension".into()))?;
    let n = s.iter().product::<usize>() / v.max(1);
    if targets.len() != n || mask.len() != n {
        return Err(Error::dim("token_loss", &s, &[targets.len(), mask.len()]));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Contract("token loss needs at least one unmasked position".into()));
    }
    let flat = g.reshape(logits, &[n, v])?;
    let picked = if rows.len() == n { flat } else { g.index_rows(flat, &rows)? };
    let tg: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let ce = g.cross_entropy_logits(picked, &tg)?;
    let sum = g.sum_all(ce)?;
    Ok((g.scale(sum, T::from_f64_lossy(1.0 / rows.len() as f64))?, rows.len()))
}

/// `M * sum_e (mean_n G[n, e])^2` per `[N, M]` gate matrix, averaged over
/// matrices. Zero when there are none.
pub fn load_balance_loss<T: Scalar>(g: &mut Graph<T>, gate_probs: &[Var]) -> Result<(Var, Vec<f64>)> {
    if gate_probs.is_empty() {
        return Ok((g.constant(crate::numcore::Tensor::scalar(T::zero())), Vec::new()));
    }
    let mut total: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(gate_probs.len());
    for &gp in gate_probs {
        let m = g.shape(gp)[1];
        let mean = g.mean_leading(gp)?;
        let sq = g.mul(mean, mean)?;
        let s = g.sum_all(sq)?;
        let l = g.scale(s, T::from_f64_lossy(m as f64))?;
        per_layer.push(g.value(l).item()?.as_f64());
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let mean = g.scale(total.unwrap(), T::from_f64_lossy(1.0 / gate_probs.len() as f64))?;
    Ok((mean, per_layer))
}

/// `alpha * token + beta * load`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    token: (Var, usize),
    load: (Var, Vec<f64>),
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let a = g.scale(token.0, T::from_f64_lossy(alpha))?;
    let b = g.scale(load.0, T::from_f64_lossy(beta))?;
    let total = g.add(a, b)?;
    let br = LossBreakdown {
        token_loss: g.value(token.0).item()?.as_f64(),
        load_loss: g.value(load.0).item()?.as_f64(),
        total: g.value(total).item()?.as_f64(),
        masked_token_count: token.1,
        per_layer_load: load.1,
    };
    Ok((total, br))
}

/// Everything one training step needs from a forward pass.
pub struct StepLoss<T> {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub encoder: EncoderOut<T>,
}

/// Encoder, head and composite loss for `batch`.
///
/// Under the target policy the head only runs on positions that carry
/// loss; the other policies need full predictions to locate the predicted
/// EOS.
pub fn nar_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    batch: &Batch,
    policy: EosMaskPolicy,
    alpha: f64,
    beta: f64,
    training: bool,
    rng: &mut R,
) -> Result<StepLoss<T>> {
    let src = batch.source();
    let (n, d) = (batch.batch_size * batch.seq_len, bind.config().embed_dim);
    let v = bind.config().tgt_vocab_size;
    let token = if policy == EosMaskPolicy::Target {
        let mask = eos_loss_mask(batch, None, policy)?;
        let active = batch.active_positions();
        let encoder = encoder_forward(g, bind, &src, Some(&active), training, rng)?;
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let h = g.reshape(encoder.hidden, &[n, d])?;
        let h = g.index_rows(h, &rows)?;
        let logits = nar_head(g, bind, h)?;
        let targets: Vec<usize> = rows.iter().map(|&i| batch.tgt_ids[i]).collect();
        (token_loss(g, logits, &targets, &vec![true; rows.len()])?, encoder)
    } else {
        let encoder = encoder_forward(g, bind, &src, None, training, rng)?;
        let logits = nar_head(g, bind, encoder.hidden)?;
        let predicted = crate::model::argmax_rows(g.value(logits).data(), v);
        let mask = eos_loss_mask(batch, Some(&predicted), policy)?;
        (token_loss(g, logits, &batch.tgt_ids, &mask)?, encoder)
    };
    let (token, encoder) = token;
    let load = load_balance_loss(g, &encoder.gate_probs)?;
    let (loss, breakdown) = total_loss(g, token, load, alpha, beta)?;
    Ok(StepLoss {
        loss,
        breakdown,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn batch_of(tgt: Vec<usize>, t: usize) -> Batch {
        let b = tgt.len() / t;
        let tgt_lengths = tgt.chunks(t).map(|r| first_eos(r).unwrap_or(0)).collect();
        Batch {
            batch_size: b,
            seq_len: t,
            src_ids: vec![3; b * t],
            tgt_ids: tgt,
            src_pad_mask: vec![false; b * t],
            tgt_lengths,
        }
    }

    #[test]
    fn mask_policies() {
        let b = batch_of(vec![3, 4, 2, 0, 0], 5);
        assert_eq!(eos_loss_mask(&b, None, EosMaskPolicy::Target).unwrap(), [true, true, true, false, false]);
        let b = batch_of(vec![3, 4, 2], 3);
        assert_eq!(eos_loss_mask(&b, Some(&[2, 5, 5]), EosMaskPolicy::Union).unwrap(), [true, true, true]);
        assert_eq!(eos_loss_mask(&b, Some(&[2, 5, 5]), EosMaskPolicy::Predicted).unwrap(), [true, false, false]);
        assert_eq!(eos_loss_mask(&b, Some(&[5, 5, 5]), EosMaskPolicy::Predicted).unwrap(), [true, true, true]);
        let bad = batch_of(vec![3, 4, 0], 3);
        assert!(matches!(eos_loss_mask(&bad, None, EosMaskPolicy::Target), Err(Error::Data(_))));
    }

    #[test]
    fn masked_mean_uses_kept_count() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![1, 3, 4]), true);
        let (l, n) = token_loss(&mut g, logits, &[0, 1, 2], &[true, true, false]).unwrap();
        assert_eq!(n, 2);
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(token_loss(&mut g, logits, &[0, 1, 2], &[false; 3]).is_err());
    }

    #[test]
    fn load_loss_examples() {
        let mut g = Graph::<f64>::new();
        let uni = g.leaf(Tensor::full(vec![3, 5], 0.2), false);
        let (l, _) = load_balance_loss(&mut g, &[uni]).unwrap();
        assert!((g.value(l).item().unwrap() - 1.0).abs() < 1e-12);
        let mut onehot = vec![0.0; 10];
        onehot[0] = 1.0;
        onehot[5] = 1.0;
        let c = g.leaf(Tensor::new(vec![2, 5], onehot).unwrap(), false);
        let (l, _) = load_balance_loss(&mut g, &[c]).unwrap();
        assert!((g.value(l).item().unwrap() - 5.0).abs() < 1e-12);
        let two = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap(), false);
        let (l, per) = load_balance_loss(&mut g, &[two, uni]).unwrap();
        assert!((per[0] - 1.25).abs() < 1e-12);
        assert!((g.value(l).item().unwrap() - 1.125).abs() < 1e-12);
        let (l, per) = load_balance_loss(&mut g, &[]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        assert!(per.is_empty());
    }
}
