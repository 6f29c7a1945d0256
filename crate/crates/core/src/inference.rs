//! Word-level transliteration and evaluation over whole lists.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{aggregate_report, EvalReport};
use crate::model::{ar_generate, ar_generate_cached, nar_generate, sharded, slice_rows, Generation, ModelParams};
use crate::numcore::Scalar;
use crate::tokenizer::{make_source_batch, Vocab};

/// Which output path produces hypotheses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decoder {
    /// One parallel pass through the position-wise head.
    #[default]
    Nar,
    /// Greedy step-by-step decoding that reruns the decoder over the whole
    /// prefix at each step; needs a model with a decoder.
    Ar,
    /// Greedy decoding with cached keys and values.
    ArCached,
}

impl std::str::FromStr for Decoder {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nar" => Ok(Decoder::Nar),
            "ar" => Ok(Decoder::Ar),
            "ar-cached" => Ok(Decoder::ArCached),
            _ => Err(crate::Error::Config(format!("unknown decoder {s:?} (expected nar, ar or ar-cached)"))),
        }
    }
}

/// Hypothesis for one input word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Output { text: String, terminated: bool },
    /// The word does not fit in `max_len` positions.
    TooLong,
}

impl Prediction {
    pub fn text(&self) -> &str {
        match self {
            Prediction::Output { text, .. } => text,
            Prediction::TooLong => "",
        }
    }

    pub fn terminated(&self) -> bool {
        matches!(self, Prediction::Output { terminated: true, .. })
    }
}

/// Default for [`Transliterator::block_tokens`].
pub const DEFAULT_BLOCK_TOKENS: usize = 384;

#[derive(Clone, Copy)]
pub struct Transliterator<'a, T> {
    pub params: &'a ModelParams<T>,
    pub src_vocab: &'a Vocab,
    pub tgt_vocab: &'a Vocab,
    pub decoder: Decoder,
    pub batch_size: usize,
    pub threads: usize,
    /// Each worker runs its rows through the model in blocks of about this
    /// many source positions, which keeps intermediates cache-resident.
    pub block_tokens: usize,
}

impl<'a, T: Scalar> Transliterator<'a, T> {
    pub fn new(params: &'a ModelParams<T>, src_vocab: &'a Vocab, tgt_vocab: &'a Vocab) -> Self {
        Transliterator {
            params,
            src_vocab,
            tgt_vocab,
            decoder: Decoder::Nar,
            batch_size: 64,
            threads: 1,
            block_tokens: DEFAULT_BLOCK_TOKENS,
        }
    }

    fn generate(&self, src: &crate::tokenizer::SourceBatch) -> Result<Generation> {
        let max_len = self.params.config.max_len;
        let block = (self.block_tokens / src.seq_len.max(1)).max(1);
        sharded(src, self.threads, |s| {
            let mut out = Generation::default();
            for lo in (0..s.batch_size).step_by(block) {
                let part = slice_rows(s, lo, (lo + block).min(s.batch_size));
                out.append(match self.decoder {
                    Decoder::Nar => nar_generate(self.params, self.tgt_vocab, &part)?,
                    Decoder::Ar => ar_generate(self.params, self.tgt_vocab, &part, max_len)?,
                    Decoder::ArCached => ar_generate_cached(self.params, self.tgt_vocab, &part, max_len)?,
                });
            }
            Ok(out)
        })
    }

    /// One prediction per word, in input order. Outputs do not depend on
    /// `batch_size` or `threads`.
    pub fn run<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<Prediction>> {
        if self.decoder != Decoder::Nar && !self.params.config.ar_decoder {
            return Err(crate::Error::Config("model has no autoregressive decoder".into()));
        }
        let words: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
        let (src, rows) = make_source_batch(&words, self.src_vocab, self.params.config.max_len);
        let bs = self.batch_size.max(1);
        let mut gen = Generation::default();
        for lo in (0..src.batch_size).step_by(bs) {
            gen.append(self.generate(&slice_rows(&src, lo, (lo + bs).min(src.batch_size)))?);
        }
        Ok(rows
            .into_iter()
            .map(|r| match r {
                Some(i) => {
                    let (text, terminated) = gen.outputs[i].clone();
                    Prediction::Output { text, terminated }
                }
                None => Prediction::TooLong,
            })
            .collect())
    }

    /// Transliterates every source and scores it against its target.
    pub fn evaluate<S: AsRef<str>>(&self, pairs: &[(S, S)]) -> Result<(EvalReport, Vec<Prediction>)> {
        let srcs: Vec<&str> = pairs.iter().map(|p| p.0.as_ref()).collect();
        let refs: Vec<&str> = pairs.iter().map(|p| p.1.as_ref()).collect();
        let preds = self.run(&srcs)?;
        let hyps: Vec<&str> = preds.iter().map(Prediction::text).collect();
        let term: Vec<bool> = preds.iter().map(Prediction::terminated).collect();
        Ok((aggregate_report(&hyps, &refs, Some(&term))?, preds))
    }
}
