//! Encoder stack, position-wise output head and parallel generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{Graph, Scalar, Var};
use crate::tokenizer::{decode_until_eos, SourceBatch, Vocab};

use super::attention::{diff_attention, standard_attention, NORM_EPS};
use super::config::{AttentionVariant, FfnVariant};
use super::moe::{dense_ffn_forward, moe_forward, RoutingTrace};
use super::params::{Binder, ModelParams};

#[derive(Clone, Debug)]
pub struct EncoderOut<T> {
    /// `[B, T, d]`.
    pub hidden: Var,
    /// One `[N, M_e]` gate matrix per mixture-of-experts layer.
    pub gate_probs: Vec<Var>,
    pub traces: Vec<RoutingTrace<T>>,
}

/// Embeds `src` and runs every encoder layer.
///
/// Feed-forward blocks only process rows flagged in `active` (all rows when
/// `None`); the others pass through unchanged.
pub fn encoder_forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    src: &SourceBatch,
    active: Option<&[bool]>,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOut<T>> {
    let cfg = bind.config();
    let layout = bind.layout();
    let (b, t, d) = (src.batch_size, src.seq_len, cfg.embed_dim);
    let table = bind.var(g, layout.embed);
    let mut x = g.embedding(table, &src.src_ids, &[b, t])?;
    let rows: Option<Vec<usize>> = active
        .filter(|a| a.iter().any(|&v| !v))
        .map(|a| a.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect());

    let mut gate_probs = Vec::new();
    let mut traces = Vec::new();
    for (l, li) in layout.layers.iter().enumerate() {
        let mark = g.mark();
        let gain = bind.var(g, li.attn_norm);
        let h = g.rmsnorm(x, gain, NORM_EPS)?;
        let a = match cfg.attention_variant {
            AttentionVariant::Differential => diff_attention(g, bind, l, h, &src.src_pad_mask)?.out,
            AttentionVariant::Standard => standard_attention(g, bind, l, h, &src.src_pad_mask)?,
        };
        let a = g.dropout(a, cfg.dropout_p, training, rng)?;
        x = g.add(x, a)?;
        g.release_since(mark, &[x]);
        let mark = g.mark();

        let gain = bind.var(g, li.ffn_norm);
        let h = g.rmsnorm(x, gain, NORM_EPS)?;
        let h = g.reshape(h, &[b * t, d])?;
        let h = match &rows {
            Some(r) => g.index_rows(h, r)?,
            None => h,
        };
        let f = match cfg.ffn_variant {
            FfnVariant::Dense => dense_ffn_forward(g, bind, l, h)?,
            FfnVariant::Moe => {
                let out = moe_forward(g, bind, l, h, training)?;
                gate_probs.push(out.gate_probs);
                traces.push(out.trace);
                out.y
            }
        };
        let f = g.dropout(f, cfg.dropout_p, training, rng)?;
        let f = match &rows {
            Some(r) => g.combine_rows(b * t, d, vec![(f, r.clone())])?,
            None => f,
        };
        let f = g.reshape(f, &[b, t, d])?;
        x = g.add(x, f)?;
        let keep: Vec<Var> = gate_probs.iter().copied().chain([x]).collect();
        g.release_since(mark, &keep);
    }
    Ok(EncoderOut {
        hidden: x,
        gate_probs,
        traces,
    })
}

/// Final norm, then `d -> d` with GELU, then `d -> V_tgt`, at every
/// position of `hidden: [.., d]`.
pub fn nar_head<T: Scalar>(g: &mut Graph<T>, bind: &mut Binder<'_, T>, hidden: Var) -> Result<Var> {
    let l = bind.layout();
    let gain = bind.var(g, l.final_norm);
    let h = g.rmsnorm(hidden, gain, NORM_EPS)?;
    let w1 = bind.var(g, l.head_w1);
    let b1 = bind.var(g, l.head_b1);
    let w2 = bind.var(g, l.head_w2);
    let b2 = bind.var(g, l.head_b2);
    let h = g.matmul(h, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2)?;
    g.add(y, b2)
}

/// Index of the largest entry of each `width`-wide row; ties go low.
pub fn argmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Outputs of a generation call plus how much sequential work it took.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generation {
    /// Decoded text and whether an EOS was produced, per batch row.
    pub outputs: Vec<(String, bool)>,
    /// Predicted ids per row.
    pub ids: Vec<Vec<usize>>,
    pub encoder_passes: usize,
    pub decoder_steps: usize,
}

impl Generation {
    pub(crate) fn append(&mut self, other: Generation) {
        self.outputs.extend(other.outputs);
        self.ids.extend(other.ids);
        self.encoder_passes += other.encoder_passes;
        self.decoder_steps += other.decoder_steps;
    }
}

/// One encoder and head pass, then per-position argmax truncated at the
/// first EOS.
pub fn nar_generate<T: Scalar>(params: &ModelParams<T>, tgt_vocab: &Vocab, src: &SourceBatch) -> Result<Generation> {
    if src.batch_size == 0 {
        return Ok(Generation::default());
    }
    let mut g = Graph::inference();
    let mut bind = Binder::new(params, false);
    let enc = encoder_forward(&mut g, &mut bind, src, None, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let logits = nar_head(&mut g, &mut bind, enc.hidden)?;
    let v = params.config.tgt_vocab_size;
    let ids = argmax_rows(g.value(logits).data(), v);
    let ids: Vec<Vec<usize>> = ids.chunks(src.seq_len).map(<[usize]>::to_vec).collect();
    Ok(Generation {
        outputs: ids.iter().map(|r| decode_until_eos(r, tgt_vocab)).collect(),
        ids,
        encoder_passes: 1,
        decoder_steps: 0,
    })
}

/// Rows `lo..hi` of a source batch.
pub fn slice_rows(src: &SourceBatch, lo: usize, hi: usize) -> SourceBatch {
    let t = src.seq_len;
    SourceBatch {
        batch_size: hi - lo,
        seq_len: t,
        src_ids: src.src_ids[lo * t..hi * t].to_vec(),
        src_pad_mask: src.src_pad_mask[lo * t..hi * t].to_vec(),
    }
}

/// Runs `f` on up to `threads` contiguous slices of `src` in parallel and
/// concatenates the results in row order.
pub fn sharded<F>(src: &SourceBatch, threads: usize, f: F) -> Result<Generation>
where
    F: Fn(&SourceBatch) -> Result<Generation> + Sync,
{
    let threads = threads.clamp(1, src.batch_size.max(1));
    if threads == 1 {
        return f(src);
    }
    let per = src.batch_size.div_ceil(threads);
    let slices: Vec<SourceBatch> = (0..src.batch_size)
        .step_by(per)
        .map(|lo| slice_rows(src, lo, (lo + per).min(src.batch_size)))
        .collect();
    let results: Vec<Result<Generation>> = std::thread::scope(|s| {
        let handles: Vec<_> = slices.iter().map(|sl| s.spawn(|| f(sl))).collect();
        handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
    });
    let mut out = Generation::default();
    for r in results {
        out.append(r?);
    }
    Ok(out)
}
