//! One-layer autoregressive decoder used as a throughput baseline.
//!
//! EOS doubles as the start symbol. Greedy decoding caches self-attention
//! keys and values, so step `s` costs one position of work plus attention
//! over `s + 1` cached entries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Mask, Scalar, Var};
use crate::tokenizer::{decode_until_eos, Batch, SourceBatch, Vocab, EOS};

use super::attention::{multi_head, trim_keys, NORM_EPS};
use super::encoder::{argmax_rows, encoder_forward, Generation};
use super::moe::stack_forward;
use super::params::{Binder, DecoderIdx, ModelParams};

fn decoder_idx<T: Scalar>(bind: &Binder<'_, T>) -> Result<DecoderIdx> {
    bind.layout()
        .decoder
        .clone()
        .ok_or_else(|| Error::Contract("model has no autoregressive decoder".into()))
}

/// Normalized encoder states the decoder attends to.
pub fn decoder_memory<T: Scalar>(g: &mut Graph<T>, bind: &mut Binder<'_, T>, hidden: Var) -> Result<Var> {
    let gain = bind.var(g, bind.layout().final_norm);
    g.rmsnorm(hidden, gain, NORM_EPS)
}

/// Decoder logits `[B, T, V_tgt]` for inputs `y_in: [B, T]` with causal
/// self-attention and cross-attention to `memory: [B, S, d]`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    memory: Var,
    src_pad: &[bool],
    y_in: &[usize],
    t: usize,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let di = decoder_idx(bind)?;
    let cfg = bind.config();
    let b = g.shape(memory)[0];
    let (memory, s, src_pad) = trim_keys(g, memory, src_pad)?;
    let (heads, dh, p) = (cfg.num_heads, cfg.decoder_head_dim(), cfg.dropout_p);
    let pos: Vec<usize> = (0..t).collect();

    let table = bind.var(g, di.embed);
    let mut x = g.embedding(table, y_in, &[b, t])?;
    let gain = bind.var(g, di.self_norm);
    let h = g.rmsnorm(x, gain, NORM_EPS)?;
    let causal = Mask::causal(t, 4)?;
    let a = multi_head(g, bind, di.self_attn, h, h, heads, dh, Some((&pos, &pos)), Some(&causal))?;
    let a = g.dropout(a, p, training, rng)?;
    x = g.add(x, a)?;

    let gain = bind.var(g, di.cross_norm);
    let h = g.rmsnorm(x, gain, NORM_EPS)?;
    let keys = Mask::keys(b, s, 4, &src_pad)?;
    let c = multi_head(g, bind, di.cross_attn, h, memory, heads, dh, None, Some(&keys))?;
    let c = g.dropout(c, p, training, rng)?;
    x = g.add(x, c)?;

    let gain = bind.var(g, di.ffn_norm);
    let h = g.rmsnorm(x, gain, NORM_EPS)?;
    let f = stack_forward(g, bind, &di.ffn, h)?;
    let f = g.dropout(f, p, training, rng)?;
    x = g.add(x, f)?;
    out_logits(g, bind, &di, x)
}

fn out_logits<T: Scalar>(g: &mut Graph<T>, bind: &mut Binder<'_, T>, di: &DecoderIdx, x: Var) -> Result<Var> {
    let gain = bind.var(g, di.final_norm);
    let h = g.rmsnorm(x, gain, NORM_EPS)?;
    let w = bind.var(g, di.out_w);
    let bias = bind.var(g, di.out_b);
    let y = g.matmul(h, w)?;
    g.add(y, bias)
}

/// Targets shifted right behind a leading EOS.
pub fn shift_right(tgt_ids: &[usize], t: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tgt_ids.len());
    for row in tgt_ids.chunks(t) {
        out.push(EOS);
        out.extend_from_slice(&row[..t - 1]);
    }
    out
}

/// Teacher-forced mean cross-entropy over positions up to and including
/// each target EOS.
pub fn ar_token_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    memory: Var,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let t = batch.seq_len;
    let y_in = shift_right(&batch.tgt_ids, t);
    let logits = decoder_forward(g, bind, memory, &batch.src_pad_mask, &y_in, t, training, rng)?;
    let v = bind.config().tgt_vocab_size;
    let flat = g.reshape(logits, &[batch.batch_size * t, v])?;
    let rows: Vec<usize> = (0..batch.batch_size * t)
        .filter(|&i| i % t <= batch.tgt_lengths[i / t])
        .collect();
    let targets: Vec<usize> = rows.iter().map(|&i| batch.tgt_ids[i]).collect();
    let picked = g.index_rows(flat, &rows)?;
    let ce = g.cross_entropy_logits(picked, &targets)?;
    let sum = g.sum_all(ce)?;
    g.scale(sum, T::from_f64_lossy(1.0 / rows.len() as f64))
}

fn finish(ids: Vec<Vec<usize>>, vocab: &Vocab, steps: usize) -> Generation {
    Generation {
        outputs: ids.iter().map(|r| decode_until_eos(r, vocab)).collect(),
        ids,
        encoder_passes: 1,
        decoder_steps: steps,
    }
}

/// Same outputs as [`ar_generate`], but keys and values of earlier
/// positions are cached so each step only processes the newest position.
pub fn ar_generate_cached<T: Scalar>(params: &ModelParams<T>, tgt_vocab: &Vocab, src: &SourceBatch, max_len: usize) -> Result<Generation> {
    let b = src.batch_size;
    if b == 0 {
        return Ok(Generation::default());
    }
    let mut g = Graph::inference();
    let mut bind = Binder::new(params, false);
    let di = decoder_idx(&bind)?;
    let cfg = &params.config;
    let (heads, dh, d, v) = (cfg.num_heads, cfg.decoder_head_dim(), cfg.embed_dim, cfg.tgt_vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = encoder_forward(&mut g, &mut bind, src, None, false, &mut rng)?;
    let memory = decoder_memory(&mut g, &mut bind, enc.hidden)?;
    let (memory, s, src_pad) = trim_keys(&mut g, memory, &src.src_pad_mask)?;
    let scale = |dim: usize| T::from_f64_lossy(1.0 / (dim as f64).sqrt());
    let score_dim = match cfg.score_scale {
        super::config::ScoreScale::HeadDim => dh,
        super::config::ScoreScale::EmbedDim => d,
    };

    let split = |g: &mut Graph<T>, x: Var, t: usize| -> Result<Var> {
        let r = g.reshape(x, &[b, t, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let merge = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let p = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(p, &[b, 1, d])
    };

    let cross = di.cross_attn;
    let wk_c = bind.var(&mut g, cross.wk);
    let wv_c = bind.var(&mut g, cross.wv);
    let kc = g.matmul(memory, wk_c)?;
    let kc = split(&mut g, kc, s)?;
    let kc_t = g.transpose(kc)?;
    let vc = g.matmul(memory, wv_c)?;
    let vc = split(&mut g, vc, s)?;
    let keys = Mask::keys(b, s, 4, &src_pad)?;

    let sa = di.self_attn;
    let table = bind.var(&mut g, di.embed);
    let mut k_cache: Option<Var> = None;
    let mut v_cache: Option<Var> = None;
    let mut cur = vec![EOS; b];
    let mut ids: Vec<Vec<usize>> = vec![Vec::with_capacity(max_len); b];
    let mut done = vec![false; b];
    let mut steps = 0;
    let mark = g.mark();
    while steps < max_len && !done.iter().all(|&x| x) {
        let e = g.embedding(table, &cur, &[b, 1])?;
        let gain = bind.var(&mut g, di.self_norm);
        let h = g.rmsnorm(e, gain, NORM_EPS)?;
        let wq = bind.var(&mut g, sa.wq);
        let wk = bind.var(&mut g, sa.wk);
        let wv = bind.var(&mut g, sa.wv);
        let wo = bind.var(&mut g, sa.wo);
        let q = g.matmul(h, wq)?;
        let q = split(&mut g, q, 1)?;
        let q = g.rope(q, &[steps], cfg.rope_base)?;
        let k = g.matmul(h, wk)?;
        let k = split(&mut g, k, 1)?;
        let k = g.rope(k, &[steps], cfg.rope_base)?;
        let k_t = g.transpose(k)?;
        let vv = g.matmul(h, wv)?;
        let vv = split(&mut g, vv, 1)?;
        let v_t = g.transpose(vv)?;
        let kt_all = match k_cache {
            Some(c) => g.concat_lastdim(&[c, k_t])?,
            None => k_t,
        };
        let vt_all = match v_cache {
            Some(c) => g.concat_lastdim(&[c, v_t])?,
            None => v_t,
        };
        k_cache = Some(kt_all);
        v_cache = Some(vt_all);
        let sc = g.matmul(q, kt_all)?;
        let sc = g.scale(sc, scale(score_dim))?;
        let a = g.softmax_lastdim(sc, None)?;
        let v_all = g.transpose(vt_all)?;
        let o = g.matmul(a, v_all)?;
        let o = merge(&mut g, o)?;
        let o = g.matmul(o, wo)?;
        let x = g.add(e, o)?;

        let gain = bind.var(&mut g, di.cross_norm);
        let h = g.rmsnorm(x, gain, NORM_EPS)?;
        let wq_c = bind.var(&mut g, cross.wq);
        let wo_c = bind.var(&mut g, cross.wo);
        let q = g.matmul(h, wq_c)?;
        let q = split(&mut g, q, 1)?;
        let sc = g.matmul(q, kc_t)?;
        let sc = g.scale(sc, scale(score_dim))?;
        let a = g.softmax_lastdim(sc, Some(&keys))?;
        let o = g.matmul(a, vc)?;
        let o = merge(&mut g, o)?;
        let o = g.matmul(o, wo_c)?;
        let x = g.add(x, o)?;

        let gain = bind.var(&mut g, di.ffn_norm);
        let h = g.rmsnorm(x, gain, NORM_EPS)?;
        let f = stack_forward(&mut g, &mut bind, &di.ffn, h)?;
        let x = g.add(x, f)?;
        let logits = out_logits(&mut g, &mut bind, &di, x)?;
        let next = argmax_rows(g.value(logits).data(), v);
        for (r, &tok) in next.iter().enumerate() {
            if !done[r] {
                ids[r].push(tok);
                done[r] = tok == EOS;
            }
        }
        cur = next;
        steps += 1;
        let keep: Vec<Var> = k_cache.iter().chain(&v_cache).copied().collect();
        g.release_since(mark, &keep);
    }
    Ok(finish(ids, tgt_vocab, steps))
}

/// Greedy decoding with one full decoder pass over the generated prefix per
/// output position, until every row has produced EOS or `max_len` steps
/// have run.
pub fn ar_generate<T: Scalar>(
    params: &ModelParams<T>,
    tgt_vocab: &Vocab,
    src: &SourceBatch,
    max_len: usize,
) -> Result<Generation> {
    let b = src.batch_size;
    if b == 0 {
        return Ok(Generation::default());
    }
    let mut g = Graph::inference();
    let mut bind = Binder::new(params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = encoder_forward(&mut g, &mut bind, src, None, false, &mut rng)?;
    let memory = decoder_memory(&mut g, &mut bind, enc.hidden)?;
    let v = params.config.tgt_vocab_size;
    let mut prefix: Vec<Vec<usize>> = vec![vec![EOS]; b];
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut steps = 0;
    let mark = g.mark();
    while steps < max_len && !done.iter().all(|&x| x) {
        let t = steps + 1;
        let y_in: Vec<usize> = prefix.iter().flatten().copied().collect();
        let logits = decoder_forward(&mut g, &mut bind, memory, &src.src_pad_mask, &y_in, t, false, &mut rng)?;
        let all = argmax_rows(g.value(logits).data(), v);
        for r in 0..b {
            let tok = all[r * t + t - 1];
            prefix[r].push(tok);
            if !done[r] {
                ids[r].push(tok);
                done[r] = tok == EOS;
            }
        }
        steps += 1;
        g.release_since(mark, &[]);
    }
    Ok(finish(ids, tgt_vocab, steps))
}
