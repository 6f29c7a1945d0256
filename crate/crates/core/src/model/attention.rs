//! Differential and standard multi-head self-attention with rotary
//! position embeddings.
//!
//! Differential layout per head `i`: query/key branch `j` occupies columns
//! `(2i + j) * d_h .. (2i + j + 1) * d_h` of the projections, and the value
//! occupies columns `i * 2d_h .. (i + 1) * 2d_h`.

use crate::error::Result;
use crate::numcore::{Graph, Mask, Scalar, Var};

use super::params::{AttnIdx, Binder};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct DiffAttnOut {
    /// `[B, T, d]`.
    pub out: Var,
    /// Attention-weighted values before the per-head norm, `[B, h, T, 2d_h]`.
    pub pre_norm: Var,
    /// Per-head λ, `[h]`.
    pub lambda: Var,
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `[B, T, d] -> [B, heads, T, width]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize, width: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, width])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, heads, T, width] -> [B, T, heads * width]`.
fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Length of the shortest key prefix holding every unpadded key, so the
/// padded tail can be cut without changing any attention weight.
pub fn key_extent(key_pad: &[bool], b: usize, t: usize) -> usize {
    (0..b)
        .filter_map(|r| key_pad[r * t..(r + 1) * t].iter().rposition(|&p| !p))
        .map(|i| i + 1)
        .max()
        .unwrap_or(t)
}

/// Key-side input and key pad flags cut to [`key_extent`].
pub(crate) fn trim_keys<T: Scalar>(g: &mut Graph<T>, x: Var, key_pad: &[bool]) -> Result<(Var, usize, Vec<bool>)> {
    let s = g.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let tk = key_extent(key_pad, b, t);
    if tk == t {
        return Ok((x, t, key_pad.to_vec()));
    }
    let kx = g.narrow(x, 1, 0, tk)?;
    let pad = key_pad.chunks(t).flat_map(|r| r[..tk].iter().copied()).collect();
    Ok((kx, tk, pad))
}

fn scores<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, scale_dim: usize, mask: Option<&Mask>) -> Result<Var> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, T::from_f64_lossy(1.0 / (scale_dim as f64).sqrt()))?;
    g.softmax_lastdim(s, mask)
}

/// Differential attention of layer `layer` over `x: [B, T, d]`.
/// `key_pad` flags `[B, T]` key positions to ignore.
pub fn diff_attention<T: Scalar>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    layer: usize,
    x: Var,
    key_pad: &[bool],
) -> Result<DiffAttnOut> {
    let cfg = bind.config();
    let li = &bind.layout().layers[layer];
    let di = li.diff.expect("differential layer");
    let (h, dh) = (cfg.num_heads, cfg.head_dim);
    let s = g.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let lambda_init = cfg.lambda_init.value(layer);
    let pos = positions(t);
    let (kx, tk, kpad) = trim_keys(g, x, key_pad)?;

    let wq = bind.var(g, li.attn.wq);
    let wk = bind.var(g, li.attn.wk);
    let wv = bind.var(g, li.attn.wv);
    let q = g.matmul(x, wq)?;
    let q = split_heads(g, q, 2 * h, dh)?;
    let q = g.rope(q, &pos, cfg.rope_base)?;
    let k = g.matmul(kx, wk)?;
    let k = split_heads(g, k, 2 * h, dh)?;
    let k = g.rope(k, &pos[..tk], cfg.rope_base)?;
    let mask = Mask::keys(b, tk, 4, &kpad)?;
    let a = scores(g, q, k, cfg.score_dim(), Some(&mask))?;
    let a = g.reshape(a, &[b, h, 2, t, tk])?;
    let a1 = g.narrow(a, 2, 0, 1)?;
    let a1 = g.reshape(a1, &[b, h, t, tk])?;
    let a2 = g.narrow(a, 2, 1, 1)?;
    let a2 = g.reshape(a2, &[b, h, t, tk])?;

    let branch = |g: &mut Graph<T>, bind: &mut Binder<'_, T>, qi: usize, ki: usize| -> Result<Var> {
        let lq = bind.var(g, qi);
        let lk = bind.var(g, ki);
        let p = g.mul(lq, lk)?;
        let s = g.sum_lastdim(p)?;
        g.exp(s)
    };
    let l1 = branch(g, bind, di.lambda_q1, di.lambda_k1)?;
    let l2 = branch(g, bind, di.lambda_q2, di.lambda_k2)?;
    let lambda = g.sub(l1, l2)?;
    let lambda = g.add_scalar(lambda, T::from_f64_lossy(lambda_init))?;
    let lam = g.reshape(lambda, &[h, 1, 1])?;
    let a2 = g.mul(a2, lam)?;
    let attn = g.sub(a1, a2)?;

    let v = g.matmul(kx, wv)?;
    let v = split_heads(g, v, h, 2 * dh)?;
    let pre_norm = g.matmul(attn, v)?;

    let o = g.permute(pre_norm, &[0, 2, 1, 3])?;
    let gain = bind.var(g, di.head_norm);
    let o = g.rmsnorm(o, gain, NORM_EPS)?;
    let o = g.scale(o, T::from_f64_lossy(1.0 - lambda_init))?;
    let o = g.reshape(o, &[b, t, h * 2 * dh])?;
    let wo = bind.var(g, li.attn.wo);
    let out = g.matmul(o, wo)?;
    Ok(DiffAttnOut { out, pre_norm, lambda })
}

/// Scaled dot-product attention with `heads` heads of width `dh` from
/// `q_in: [B, Tq, d]` to `kv_in: [B, Tk, d]`, followed by the output
/// projection. Rotary embeddings use `q_pos` and `k_pos` when given.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<T: Scalar>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    idx: AttnIdx,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    dh: usize,
    rope: Option<(&[usize], &[usize])>,
    mask: Option<&Mask>,
) -> Result<Var> {
    let cfg = bind.config();
    let wq = bind.var(g, idx.wq);
    let wk = bind.var(g, idx.wk);
    let wv = bind.var(g, idx.wv);
    let wo = bind.var(g, idx.wo);
    let q = g.matmul(q_in, wq)?;
    let mut q = split_heads(g, q, heads, dh)?;
    let k = g.matmul(kv_in, wk)?;
    let mut k = split_heads(g, k, heads, dh)?;
    if let Some((qp, kp)) = rope {
        q = g.rope(q, qp, cfg.rope_base)?;
        k = g.rope(k, kp, cfg.rope_base)?;
    }
    let scale_dim = match cfg.score_scale {
        super::config::ScoreScale::HeadDim => dh,
        super::config::ScoreScale::EmbedDim => cfg.embed_dim,
    };
    let a = scores(g, q, k, scale_dim, mask)?;
    let v = g.matmul(kv_in, wv)?;
    let v = split_heads(g, v, heads, dh)?;
    let o = g.matmul(a, v)?;
    let o = merge_heads(g, o)?;
    g.matmul(o, wo)
}

/// Conventional `h`-head self-attention of layer `layer`.
pub fn standard_attention<T: Scalar>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    layer: usize,
    x: Var,
    key_pad: &[bool],
) -> Result<Var> {
    let cfg = bind.config();
    let s = g.shape(x).to_vec();
    let pos = positions(s[1]);
    let (kx, tk, kpad) = trim_keys(g, x, key_pad)?;
    let mask = Mask::keys(s[0], tk, 4, &kpad)?;
    let idx = bind.layout().layers[layer].attn;
    multi_head(g, bind, idx, x, kx, cfg.num_heads, cfg.head_dim, Some((&pos, &pos[..tk])), Some(&mask))
}
