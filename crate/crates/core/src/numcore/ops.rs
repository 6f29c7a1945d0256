//! Differentiable operations on [`Graph`] and their reverse rules.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{BMap, Graph, Op, Var};
use super::scalar::Scalar;
use super::tensor::{broadcast_index_map, broadcast_strides, numel, strides, Tensor};

/// tanh-approximation GELU constant.
pub const GELU_COEFF: f64 = 0.044715;

/// Boolean mask, `true` = excluded. Broadcasts against the masked tensor
/// under right-aligned rules (each dim equal or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim("Mask::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Key-padding mask `[B, 1, .., 1, T]` of the given rank from `[B, T]` flags.
    pub fn keys(batch: usize, seq: usize, rank: usize, excluded: &[bool]) -> Result<Self> {
        if rank < 2 {
            return Err(Error::Contract("key mask needs rank >= 2".into()));
        }
        let mut shape = vec![1; rank];
        shape[0] = batch;
        shape[rank - 1] = seq;
        Self::new(shape, excluded.to_vec())
    }

    /// Causal mask `[1, .., T, T]`: query `i` may not see key `j > i`.
    pub fn causal(seq: usize, rank: usize) -> Result<Self> {
        if rank < 2 {
            return Err(Error::Contract("causal mask needs rank >= 2".into()));
        }
        let mut shape = vec![1; rank];
        shape[rank - 2] = seq;
        shape[rank - 1] = seq;
        let data = (0..seq * seq).map(|k| k % seq > k / seq).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Elementwise OR after broadcasting both to `shape`.
    pub fn union(&self, other: &Mask, shape: &[usize]) -> Result<Mask> {
        let a = broadcast_strides(&self.shape, shape)
            .ok_or_else(|| Error::dim("Mask::union", &self.shape, shape))?;
        let b = broadcast_strides(&other.shape, shape)
            .ok_or_else(|| Error::dim("Mask::union", &other.shape, shape))?;
        let ma = broadcast_index_map(shape, &a);
        let mb = broadcast_index_map(shape, &b);
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| self.data[i] || other.data[j])
            .collect();
        Mask::new(shape.to_vec(), data)
    }
}

fn bmap_for(a: &[usize], b: &[usize], op: &'static str) -> Result<BMap> {
    if a == b {
        return Ok(BMap::Same);
    }
    let blen = numel(b);
    // trailing-dims broadcast, e.g. a bias
    let trimmed: Vec<usize> = {
        let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
        b[first..].to_vec()
    };
    if trimmed.len() <= a.len() && a[a.len() - trimmed.len()..] == trimmed[..] {
        return Ok(BMap::Cyclic(blen.max(1)));
    }
    let s = broadcast_strides(b, a).ok_or_else(|| Error::dim(op, a, b))?;
    Ok(BMap::Gather(broadcast_index_map(a, &s)))
}

#[inline]
/// `tanh` through a single `exp`, accurate to a few ulps in absolute terms.
fn tanh_via_exp<T: Scalar>(u: T) -> T {
    let e = (-(u.abs() + u.abs())).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_COEFF);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let th = tanh_via_exp(u);
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
    (y, dy)
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

/// Row-wise masked softmax over the last dimension, in place.
fn softmax_rows<T: Scalar>(
    data: &mut [T],
    width: usize,
    mask: Option<(&[bool], &[usize], bool)>,
) -> Result<()> {
    for (r, row) in data.chunks_mut(width).enumerate() {
        let excluded = |j: usize| match mask {
            Some((m, offsets, scalar_row)) => m[offsets[r] + if scalar_row { 0 } else { j }],
            None => false,
        };
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if !excluded(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::Contract(format!(
                "softmax row {r} is fully masked"
            )));
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if excluded(j) {
                *v = T::zero();
            } else {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    Ok(())
}

/// Computes for each row of a `[.., width]` tensor the offset of its mask row.
fn mask_row_offsets(xshape: &[usize], mask: &Mask) -> Result<(Vec<usize>, bool)> {
    let rank = xshape.len();
    let mut mshape = mask.shape.clone();
    if mshape.len() > rank {
        return Err(Error::dim("softmax mask", xshape, &mask.shape));
    }
    while mshape.len() < rank {
        mshape.insert(0, 1);
    }
    let last = rank - 1;
    let mlast = mshape[last];
    if mlast != xshape[last] && mlast != 1 {
        return Err(Error::dim("softmax mask", xshape, &mask.shape));
    }
    let ms = broadcast_strides(&mshape[..last], &xshape[..last])
        .ok_or_else(|| Error::dim("softmax mask", xshape, &mask.shape))?;
    // rows of the mask have `mlast` entries
    let ms: Vec<usize> = ms.iter().map(|s| s * mlast).collect();
    let offsets = broadcast_index_map(&xshape[..last], &ms);
    Ok((offsets, mlast == 1))
}

impl<T: Scalar> Graph<T> {
    /// `[.., m, k] x [.., k, n]`; `b` may also be a shared `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::dim("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let shared_b = bsh.len() == 2;
        if k != k2 || (!shared_b && ash[..ash.len() - 2] != bsh[..bsh.len() - 2]) {
            return Err(Error::dim("matmul", &ash, &bsh));
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); numel(&out_shape)];
        if shared_b {
            let rows = numel(&ash[..ash.len() - 1]);
            T::gemm(rows, k, n, av, k as isize, 1, bv, n as isize, 1, T::zero(), &mut out);
        } else {
            let batch = numel(&ash[..ash.len() - 2]);
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push("matmul", t, &[a, b], || Op::MatMul { a, b, shared_b })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, BMap)> {
        let ash = self.shape(a).to_vec();
        let map = bmap_for(&ash, self.shape(b), name)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = match &map {
            BMap::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            BMap::Cyclic(len) => av
                .chunks(*len)
                .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
            BMap::Gather(idx) => av.iter().zip(idx).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        Ok((Tensor::new(ash, data)?, map))
    }

    /// `a + b`, broadcasting `b` into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, &[a, b], || Op::Add { a, b, map })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, &[a, b], || Op::Sub { a, b, map })
    }

    /// Hadamard product, broadcasting `b` into `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, &[a, b], || Op::Mul { a, b, map })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", t, &[a], || Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x + c).collect())?;
        self.push("add_scalar", t, &[a], || Op::AddScalar { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.exp()).collect())?;
        self.push("exp", t, &[a], || Op::Exp { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| gelu_scalar(x)).collect())?;
        self.push("gelu", t, &[a], || Op::Gelu { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), &[a], || Op::SumAll { a })
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let sh = v.shape();
        let Some((&w, rest)) = sh.split_last() else {
            return Err(Error::dim("sum_lastdim", sh, &[]));
        };
        let data = if w == 0 {
            vec![T::zero(); numel(rest)]
        } else {
            v.data().chunks(w).map(|c| c.iter().copied().sum()).collect()
        };
        let t = Tensor::new(rest.to_vec(), data)?;
        self.push("sum_lastdim", t, &[a], || Op::SumLast { a })
    }

    /// Mean over the first dimension: `[N, ..] -> [..]`.
    pub fn mean_leading(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let sh = v.shape();
        if sh.is_empty() || sh[0] == 0 {
            return Err(Error::dim("mean_leading", sh, &[]));
        }
        let n = sh[0];
        let w = v.len() / n;
        let mut out = vec![T::zero(); w];
        for row in v.data().chunks(w) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        out.iter_mut().for_each(|o| *o = *o * inv);
        let t = Tensor::new(sh[1..].to_vec(), out)?;
        self.push("mean_leading", t, &[a], || Op::MeanLeading { a })
    }

    /// Softmax over the last dimension with max subtraction. Masked entries
    /// come out exactly zero; a row with every entry masked is an error.
    pub fn softmax_lastdim(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let v = self.value(a);
        let sh = v.shape().to_vec();
        let Some(&w) = sh.last() else {
            return Err(Error::dim("softmax_lastdim", &sh, &[]));
        };
        let mut data = v.data().to_vec();
        if w > 0 {
            match mask {
                Some(m) => {
                    let (offsets, scalar_row) = mask_row_offsets(&sh, m)?;
                    softmax_rows(&mut data, w, Some((m.data(), &offsets, scalar_row)))?;
                }
                None => softmax_rows(&mut data, w, None)?,
            }
        }
        let t = Tensor::new(sh, data)?;
        self.push("softmax", t, &[a], || Op::Softmax { a })
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the last dimension. `gain`
    /// covers trailing dims of `x`, e.g. `[d]` or per-head `[h, d]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gain).to_vec();
        if xs.is_empty() || gs.is_empty() || gs.len() > xs.len() || xs[xs.len() - gs.len()..] != gs[..] {
            return Err(Error::dim("rmsnorm", &xs, &gs));
        }
        let d = *xs.last().unwrap();
        let glen = numel(&gs);
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(xv.len() / d.max(1));
        for (r, row) in xv.chunks(d).enumerate() {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let ir = T::one() / (ms + eps).sqrt();
            let goff = (r * d) % glen;
            out.extend(row.iter().zip(&gv[goff..goff + d]).map(|(&v, &g)| v * ir * g));
            inv.push(ir);
        }
        let t = Tensor::new(xs, out)?;
        self.push("rmsnorm", t, &[x, gain], || Op::RmsNorm { x, gain, inv_rms: inv })
    }

    /// Per-row `-log softmax(logits)[target]` for `[N, V]` logits.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::dim("cross_entropy_logits", &sh, &[targets.len()]));
        }
        let v = sh[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross-entropy target vocabulary",
                index: bad,
                bound: v,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut out = Vec::with_capacity(targets.len());
        for (row, &t) in lv.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            out.push((max - row[t]) + sum.ln());
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let t = Tensor::new(vec![targets.len()], out)?;
        let targets = targets.to_vec();
        self.push("cross_entropy", t, &[logits], || Op::CrossEntropy { logits, targets, probs })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let mut seen = vec![false; sh.len()];
        if axes.len() != sh.len() || axes.iter().any(|&x| x >= sh.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", &sh, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sh[x]).collect();
        let data = permute_data(self.value(a).data(), &sh, axes);
        let t = Tensor::new(out_shape, data)?;
        let axes = axes.to_vec();
        self.push("permute", t, &[a], || Op::Permute { a, axes })
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, &[a], || Op::Reshape { a })
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_lastdim", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let parts = parts.to_vec();
        let inputs = parts.clone();
        self.push("concat", t, &inputs, || Op::Concat { parts })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(Error::dim("narrow", &sh, &[axis, start, len]));
        }
        let outer = numel(&sh[..axis]);
        let inner = numel(&sh[axis + 1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * sh[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sh;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        self.push("narrow", t, &[a], || Op::Narrow { a, axis, start })
    }

    /// Rows of a `[V, d]` table for each id; output is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(prefix) != ids.len() {
            return Err(Error::dim("embedding", &ts, prefix));
        }
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, data)?;
        let ids = ids.to_vec();
        self.push("embedding", t, &[table], || Op::Embedding { table, ids })
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors
    /// by `1/(1-p)` while `training`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let v = self.value(a);
        let keep: Vec<T> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = v.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push("dropout", t, &[a], || Op::Dropout { a, keep })
    }

    /// Rotary embedding on `[.., T, d_h]`: coordinate pairs `(2i, 2i+1)` at
    /// position `p` rotate by `p * base^(-2i/d_h)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() < 2 || sh[sh.len() - 2] != positions.len() {
            return Err(Error::dim("rope", &sh, &[positions.len()]));
        }
        let dh = sh[sh.len() - 1];
        if dh % 2 != 0 {
            return Err(Error::Config(format!("rotary head dim {dh} must be even")));
        }
        let half = dh / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos.push(T::from_f64_lossy(theta.cos()));
                sin.push(T::from_f64_lossy(theta.sin()));
            }
        }
        let tlen = positions.len();
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for (r, (row, out)) in src.chunks(dh).zip(data.chunks_mut(dh)).enumerate() {
            let t = r % tlen;
            for i in 0..half {
                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                out[2 * i] = x0 * c - x1 * s;
                out[2 * i + 1] = x0 * s + x1 * c;
            }
        }
        let t = Tensor::new(sh, data)?;
        self.push("rope", t, &[a], || Op::Rope { a, cos, sin })
    }

    /// Selects rows of a `[N, d]` tensor.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(Error::dim("index_rows", &sh, &[idx.len()]));
        }
        let (n, d) = (sh[0], sh[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index { what: "rows", index: i, bound: n });
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        let idx = idx.to_vec();
        self.push("index_rows", t, &[a], || Op::IndexRows { a, idx })
    }

    /// Picks single elements by flat index into a 1-D result.
    pub fn gather_entries(&mut self, a: Var, flat_idx: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(flat_idx.len());
        for &i in flat_idx {
            data.push(*src.get(i).ok_or(Error::Index {
                what: "gather_entries",
                index: i,
                bound: src.len(),
            })?);
        }
        let t = Tensor::new(vec![flat_idx.len()], data)?;
        let idx = flat_idx.to_vec();
        self.push("gather_entries", t, &[a], || Op::GatherEntries { a, idx })
    }

    /// `[n_rows, d]` output where part `p` row `i` is added into row `idx_p[i]`.
    pub fn combine_rows(&mut self, n_rows: usize, d: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut data = vec![T::zero(); n_rows * d];
        for (v, idx) in &parts {
            let s = self.shape(*v);
            if s.len() != 2 || s[1] != d || s[0] != idx.len() {
                return Err(Error::dim("combine_rows", s, &[idx.len(), d]));
            }
            let src = self.value(*v).data();
            for (row, &target) in src.chunks(d.max(1)).zip(idx) {
                if target >= n_rows {
                    return Err(Error::Index { what: "combine_rows", index: target, bound: n_rows });
                }
                for (o, &x) in data[target * d..(target + 1) * d].iter_mut().zip(row) {
                    *o = *o + x;
                }
            }
        }
        let t = Tensor::new(vec![n_rows, d], data)?;
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        self.push("combine_rows", t, &inputs, || Op::CombineRows { parts })
    }

    pub(crate) fn backprop(&mut self, id: usize) {
        let g = self.nodes[id].grad.take().expect("caller checked grad");
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_b } => self.back_matmul(id, *a, *b, *shared_b, &g),
            Op::Add { a, b, map } => {
                self.accumulate_with(*a, |ga| add_into(ga, &g));
                self.accumulate_with(*b, |gb| reduce_into(gb, &g, map, T::one()));
            }
            Op::Sub { a, b, map } => {
                self.accumulate_with(*a, |ga| add_into(ga, &g));
                self.accumulate_with(*b, |gb| reduce_into(gb, &g, map, -T::one()));
            }
            Op::Mul { a, b, map } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (ad, bd) = (av.data(), bv.data());
                self.accumulate_with(*a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x = *x + g[i] * bd[map.at(i)];
                    }
                });
                self.accumulate_with(*b, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        let j = map.at(i);
                        gb[j] = gb[j] + gi * ad[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate_with(*a, |ga| ga.iter_mut().zip(&g).for_each(|(x, &gi)| *x = *x + gi * c));
            }
            Op::AddScalar { a } => self.accumulate_with(*a, |ga| add_into(ga, &g)),
            Op::Exp { a } => {
                let y = self.nodes[id].value.clone();
                self.accumulate_with(*a, |ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *x = *x + gi * yi;
                    }
                });
            }
            Op::Gelu { a } => {
                let xv = self.nodes[a.0].value.clone();
                self.accumulate_with(*a, |ga| {
                    for ((x, &gi), &xi) in ga.iter_mut().zip(&g).zip(xv.data()) {
                        *x = *x + gi * gelu_parts(xi).1;
                    }
                });
            }
            Op::SumAll { a } => {
                let g0 = g[0];
                self.accumulate_with(*a, |ga| ga.iter_mut().for_each(|x| *x = *x + g0));
            }
            Op::SumLast { a } => {
                let w = *self.nodes[a.0].value.shape().last().unwrap();
                self.accumulate_with(*a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x = *x + g[i / w];
                    }
                });
            }
            Op::MeanLeading { a } => {
                let n = self.nodes[a.0].value.shape()[0];
                let inv = T::one() / T::from_usize(n).unwrap();
                let w = g.len();
                self.accumulate_with(*a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x = *x + g[i % w] * inv;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = self.nodes[id].value.clone();
                let w = *y.shape().last().unwrap();
                self.accumulate_with(*a, |ga| {
                    for ((gx, gy), yr) in ga.chunks_mut(w).zip(g.chunks(w)).zip(y.data().chunks(w)) {
                        let dot: T = gy.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for ((x, &gi), &yi) in gx.iter_mut().zip(gy).zip(yr) {
                            *x = *x + yi * (gi - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.clone();
                let d = *xv.shape().last().unwrap();
                let glen = gv.len();
                let dn = T::from_usize(d).unwrap();
                self.accumulate_with(*gain, |gg| {
                    for (r, (xr, dy)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                        let goff = (r * d) % glen;
                        for j in 0..d {
                            gg[goff + j] = gg[goff + j] + dy[j] * xr[j] * inv_rms[r];
                        }
                    }
                });
                self.accumulate_with(*x, |gx| {
                    for (r, ((xr, dy), out)) in xv.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let goff = (r * d) % glen;
                        let ir = inv_rms[r];
                        let gw = &gv.data()[goff..goff + d];
                        let s: T = (0..d).map(|j| gw[j] * dy[j] * xr[j]).sum();
                        let k = ir * ir * ir * s / dn;
                        for j in 0..d {
                            out[j] = out[j] + ir * gw[j] * dy[j] - xr[j] * k;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.nodes[logits.0].value.shape()[1];
                self.accumulate_with(*logits, |gl| {
                    for (r, (row, pr)) in gl.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                        for (j, (x, &p)) in row.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            *x = *x + g[r] * (p - onehot);
                        }
                    }
                });
            }
            Op::Permute { a, axes } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_data(&g, &out_shape, &inverse);
                self.accumulate(*a, back);
            }
            Op::Reshape { a } => self.accumulate(*a, g.clone()),
            Op::Concat { parts } => {
                let total = *self.nodes[id].value.shape().last().unwrap();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = *self.nodes[p.0].value.shape().last().unwrap();
                    self.accumulate_with(p, |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] = gp[r * w + j] + g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Narrow { a, axis, start } => {
                let sh = self.nodes[a.0].value.shape().to_vec();
                let len = self.nodes[id].value.shape()[*axis];
                let outer = numel(&sh[..*axis]);
                let inner = numel(&sh[axis + 1..]);
                let full = sh[*axis];
                self.accumulate_with(*a, |ga| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (x, &gi) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *x = *x + gi;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                self.accumulate_with(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::Dropout { a, keep } => {
                self.accumulate_with(*a, |ga| {
                    for ((x, &gi), &k) in ga.iter_mut().zip(&g).zip(keep) {
                        *x = *x + gi * k;
                    }
                });
            }
            Op::Rope { a, cos, sin } => {
                let sh = self.nodes[id].value.shape().to_vec();
                let dh = sh[sh.len() - 1];
                let tlen = sh[sh.len() - 2];
                let half = dh / 2;
                self.accumulate_with(*a, |ga| {
                    for (r, (gx, gy)) in ga.chunks_mut(dh).zip(g.chunks(dh)).enumerate() {
                        let t = r % tlen;
                        for i in 0..half {
                            let (c, s) = (cos[t * half + i], sin[t * half + i]);
                            let (y0, y1) = (gy[2 * i], gy[2 * i + 1]);
                            gx[2 * i] = gx[2 * i] + y0 * c + y1 * s;
                            gx[2 * i + 1] = gx[2 * i + 1] - y0 * s + y1 * c;
                        }
                    }
                });
            }
            Op::IndexRows { a, idx } => {
                let d = self.nodes[a.0].value.shape()[1];
                self.accumulate_with(*a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            ga[i * d + j] = ga[i * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::GatherEntries { a, idx } => {
                self.accumulate_with(*a, |ga| {
                    for (&i, &gi) in idx.iter().zip(&g) {
                        ga[i] = ga[i] + gi;
                    }
                });
            }
            Op::CombineRows { parts } => {
                let d = self.nodes[id].value.shape()[1];
                for (v, idx) in parts {
                    self.accumulate_with(*v, |gp| {
                        for (r, &target) in idx.iter().enumerate() {
                            for j in 0..d {
                                gp[r * d + j] = gp[r * d + j] + g[target * d + j];
                            }
                        }
                    });
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn back_matmul(&mut self, id: usize, a: Var, b: Var, shared_b: bool, g: &[T]) {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let ash = av.shape();
        let bsh = bv.shape();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let batch = numel(&ash[..ash.len() - 2]);
        let _ = id;
        self.accumulate_with(a, |ga| {
            for i in 0..batch {
                let bsl = if shared_b { bv.data() } else { &bv.data()[i * k * n..(i + 1) * k * n] };
                // dA = dC * B^T
                T::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    bsl,
                    1,
                    n as isize,
                    T::one(),
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
            }
        });
        self.accumulate_with(b, |gb| {
            if shared_b {
                let rows = batch * m;
                // dB = A^T * dC over all rows at once
                T::gemm(k, rows, n, av.data(), 1, k as isize, g, n as isize, 1, T::one(), gb);
            } else {
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        1,
                        k as isize,
                        &g[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        T::one(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        });
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y;
    }
}

fn reduce_into<T: Scalar>(dst: &mut [T], g: &[T], map: &BMap, sign: T) {
    match map {
        BMap::Same => {
            for (x, &y) in dst.iter_mut().zip(g) {
                *x = *x + sign * y;
            }
        }
        _ => {
            for (i, &gi) in g.iter().enumerate() {
                let j = map.at(i);
                dst[j] = dst[j] + sign * gi;
            }
        }
    }
}

pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let n = src.len();
    if n == 0 {
        return Vec::new();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the source for each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        // innermost axis copied in a tight loop
        let s = step[last];
        for j in 0..out_shape[last] {
            out.push(src[off + j * s]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
