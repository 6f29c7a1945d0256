//! Character vocabularies and padded batches.
//!
//! Symbols are Unicode scalar values. Ids 0..3 are reserved for PAD, UNK
//! and EOS; corpus characters follow in order of first appearance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const NUM_SPECIAL: usize = 3;

pub const UNK_CHAR: char = '\u{FFFD}';

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    chars: String,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_chars(r.chars.chars())
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            chars: v.chars.iter().collect(),
        }
    }
}

impl Vocab {
    /// Vocabulary whose non-reserved ids follow `chars` (duplicates ignored).
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Vocab {
            chars: Vec::new(),
            ids: HashMap::new(),
        };
        for c in chars {
            v.insert(c);
        }
        v
    }

    fn insert(&mut self, c: char) {
        if !self.ids.contains_key(&c) {
            self.ids.insert(c, self.chars.len() + NUM_SPECIAL);
            self.chars.push(c);
        }
    }

    /// Total ids including the reserved ones.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(NUM_SPECIAL).and_then(|i| self.chars.get(i).copied())
    }

    /// Corpus characters in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

/// Builds source and target vocabularies from `(source, target)` pairs.
pub fn build_vocab<'a, I>(corpus: I) -> Result<(Vocab, Vocab)>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut src = Vocab::from_chars([]);
    let mut tgt = Vocab::from_chars([]);
    let mut pairs = 0usize;
    for (s, t) in corpus {
        s.chars().for_each(|c| src.insert(c));
        t.chars().for_each(|c| tgt.insert(c));
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    Ok((src, tgt))
}

/// Maps `word` to exactly `max_len` ids: characters (UNK if unseen), an
/// optional EOS, then PAD.
pub fn encode(word: &str, vocab: &Vocab, max_len: usize, append_eos: bool) -> Result<Vec<usize>> {
    let len = word.chars().count();
    let needed = len + usize::from(append_eos);
    if needed == 0 || needed > max_len {
        return Err(Error::LengthExceeded { len: needed, max_len });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.extend(word.chars().map(|c| vocab.id(c)));
    if append_eos {
        ids.push(EOS);
    }
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// Renders ids up to (excluding) the first EOS. The flag is `false` when no
/// EOS was found.
pub fn decode_until_eos(ids: &[usize], vocab: &Vocab) -> (String, bool) {
    let mut out = String::new();
    for &id in ids {
        match id {
            EOS => return (out, true),
            PAD => {}
            _ => out.push(vocab.char_of(id).unwrap_or(UNK_CHAR)),
        }
    }
    (out, false)
}

/// Padded id matrices for a batch of pairs, row-major `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub src_ids: Vec<usize>,
    pub tgt_ids: Vec<usize>,
    /// `true` exactly where `src_ids == PAD`.
    pub src_pad_mask: Vec<bool>,
    /// Index of the target EOS in each row.
    pub tgt_lengths: Vec<usize>,
}

/// Padded source-only batch for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub src_ids: Vec<usize>,
    pub src_pad_mask: Vec<bool>,
}

impl Batch {
    pub fn source(&self) -> SourceBatch {
        SourceBatch {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            src_ids: self.src_ids.clone(),
            src_pad_mask: self.src_pad_mask.clone(),
        }
    }

    /// Positions that carry information: a non-PAD source symbol or a
    /// target position up to and including EOS.
    pub fn active_positions(&self) -> Vec<bool> {
        (0..self.batch_size * self.seq_len)
            .map(|i| !self.src_pad_mask[i] || (i % self.seq_len) <= self.tgt_lengths[i / self.seq_len])
            .collect()
    }
}

/// How wide a training batch is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchWidth {
    /// Always `max_len` columns.
    Fixed,
    /// Just enough columns for the longest source or target in the batch.
    Trimmed,
}

/// Result of batching: pairs that do not fit `max_len` are skipped and
/// counted, never truncated.
#[derive(Clone, Debug)]
pub struct Batched {
    pub batch: Option<Batch>,
    pub skipped: usize,
}

pub fn make_batch(
    pairs: &[(&str, &str)],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    max_len: usize,
    width: BatchWidth,
) -> Batched {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (s, t) in pairs {
        match (encode(s, src_vocab, max_len, true), encode(t, tgt_vocab, max_len, true)) {
            (Ok(a), Ok(b)) => rows.push((a, b, s.chars().count() + 1, t.chars().count())),
            _ => {
                log::warn!("skipping pair ({s:?}, {t:?}): longer than max_len {max_len}");
                skipped += 1;
            }
        }
    }
    if rows.is_empty() {
        return Batched { batch: None, skipped };
    }
    let seq_len = match width {
        BatchWidth::Fixed => max_len,
        BatchWidth::Trimmed => rows.iter().map(|r| r.2.max(r.3 + 1)).max().unwrap(),
    };
    let mut batch = Batch {
        batch_size: rows.len(),
        seq_len,
        src_ids: Vec::with_capacity(rows.len() * seq_len),
        tgt_ids: Vec::with_capacity(rows.len() * seq_len),
        src_pad_mask: Vec::with_capacity(rows.len() * seq_len),
        tgt_lengths: Vec::with_capacity(rows.len()),
    };
    for (s, t, _, tlen) in rows {
        batch.src_ids.extend_from_slice(&s[..seq_len]);
        batch.tgt_ids.extend_from_slice(&t[..seq_len]);
        batch.tgt_lengths.push(tlen);
    }
    batch.src_pad_mask = batch.src_ids.iter().map(|&i| i == PAD).collect();
    Batched {
        batch: Some(batch),
        skipped,
    }
}

/// Encodes source words at a fixed width. Words that do not fit come back
/// as `None` in the returned position list.
pub fn make_source_batch(words: &[&str], vocab: &Vocab, max_len: usize) -> (SourceBatch, Vec<Option<usize>>) {
    let mut src_ids = Vec::with_capacity(words.len() * max_len);
    let mut rows = Vec::with_capacity(words.len());
    let mut n = 0;
    for w in words {
        match encode(w, vocab, max_len, true) {
            Ok(ids) => {
                src_ids.extend(ids);
                rows.push(Some(n));
                n += 1;
            }
            Err(_) => rows.push(None),
        }
    }
    let src_pad_mask = src_ids.iter().map(|&i| i == PAD).collect();
    (
        SourceBatch {
            batch_size: n,
            seq_len: max_len,
            src_ids,
            src_pad_mask,
        },
        rows,
    )
}
