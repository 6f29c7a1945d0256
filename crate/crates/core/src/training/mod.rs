//! Optimization loop: schedule, optimizer, epochs, validation and
//! checkpoint selection.

pub mod adamw;
pub mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Decoder, Transliterator};
use crate::model::{ar_token_loss, decoder_memory, Binder, Checkpoint, ModelConfig, ModelParams, Variant};
use crate::numcore::Graph;
use crate::objective::{nar_loss, EosMaskPolicy, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::synthdata::Pair;
use crate::tokenizer::{build_vocab, encode, make_batch, BatchWidth, Vocab};

pub use adamw::{adamw_step, check_grads, clip_grad_norm, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, warmup_steps};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub eos_mask_policy: EosMaskPolicy,
    pub variant: Variant,
    /// Global gradient-norm limit; no clipping when `None`.
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-3,
            warmup_fraction: 0.15,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            eos_mask_policy: EosMaskPolicy::Target,
            variant: Variant::DiffMoe,
            grad_clip: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub schema_version: u32,
    pub epoch: usize,
    pub token_loss: f64,
    pub load_loss: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_loss: Option<f64>,
    pub val_cer: Option<f64>,
    pub val_wacc: Option<f64>,
    pub dropped_token_fraction: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Model and optimizer state of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub state: OptimizerState<f32>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    train: Vec<Pair>,
    valid: Vec<Pair>,
    /// Training pairs left out because they exceed `max_len`.
    pub skipped: usize,
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    best: Option<(f64, usize, ModelParams<f32>)>,
    pub history: Vec<EpochMetrics>,
}

fn fits(p: &Pair, src: &Vocab, tgt: &Vocab, max_len: usize) -> bool {
    encode(&p.0, src, max_len, true).is_ok() && encode(&p.1, tgt, max_len, true).is_ok()
}

impl Trainer {
    /// Builds vocabularies from `train`, applies `config.variant` to the
    /// `model` template and initializes weights from `config.seed`.
    pub fn new(model: &ModelConfig, config: TrainConfig, train: &[Pair], valid: &[Pair]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let (src_vocab, tgt_vocab) = build_vocab(train.iter().map(|(s, t)| (s.as_str(), t.as_str())))?;
        let mut mc = model.clone().with_variant(config.variant);
        mc.src_vocab_size = src_vocab.len();
        mc.tgt_vocab_size = tgt_vocab.len();
        mc.eos_mask_policy = config.eos_mask_policy;
        mc.validate()?;
        let kept: Vec<Pair> = train
            .iter()
            .filter(|p| fits(p, &src_vocab, &tgt_vocab, mc.max_len))
            .cloned()
            .collect();
        let skipped = train.len() - kept.len();
        if skipped > 0 {
            log::warn!("skipped {skipped} training pairs longer than max_len {}", mc.max_len);
        }
        if kept.is_empty() {
            return Err(Error::Data(format!("no training pair fits in max_len {}", mc.max_len)));
        }
        let params = ModelParams::init(&mc, config.seed)?;
        let steps_per_epoch = kept.len().div_ceil(config.batch_size);
        Ok(Trainer {
            state: OptimizerState::new(&params),
            total_steps: steps_per_epoch * config.epochs,
            config,
            params,
            src_vocab,
            tgt_vocab,
            train: kept,
            valid: valid.to_vec(),
            skipped,
            epoch: 0,
            step: 0,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn train_pairs(&self) -> &[Pair] {
        &self.train
    }

    pub fn decoder(&self) -> Decoder {
        if self.params.config.ar_decoder {
            Decoder::ArCached
        } else {
            Decoder::Nar
        }
    }

    /// Inference over the current weights with the model's own decoder.
    pub fn transliterator(&self) -> Transliterator<'_, f32> {
        let mut t = Transliterator::new(&self.params, &self.src_vocab, &self.tgt_vocab);
        t.decoder = self.decoder();
        t.batch_size = self.config.eval_batch_size;
        t
    }

    /// Shuffled pair order for `epoch`, a pure function of seed and epoch.
    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// One pass over the training pairs followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let cfg = self.config.clone();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D80F);
        dropout_rng.set_stream(self.epoch as u64);
        let (mut tok, mut load, mut total, mut ar_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut dropped, mut slots) = (0usize, 0usize);
        let mut lr = 0.0;
        let order = self.order(self.epoch);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<(&str, &str)> = chunk
                .iter()
                .map(|&i| (self.train[i].0.as_str(), self.train[i].1.as_str()))
                .collect();
            let max_len = self.params.config.max_len;
            let batch = make_batch(&pairs, &self.src_vocab, &self.tgt_vocab, max_len, BatchWidth::Trimmed)
                .batch
                .ok_or_else(|| Error::Data("batch lost every pair".into()))?;
            let mut grads = {
                let mut g = Graph::new();
                let mut bind = Binder::new(&self.params, true);
                let step = nar_loss(&mut g, &mut bind, &batch, cfg.eos_mask_policy, cfg.alpha, cfg.beta, true, &mut dropout_rng)?;
                let mut loss = step.loss;
                if self.params.config.ar_decoder {
                    let memory = decoder_memory(&mut g, &mut bind, step.encoder.hidden)?;
                    let ar = ar_token_loss(&mut g, &mut bind, memory, &batch, true, &mut dropout_rng)?;
                    ar_sum += g.value(ar).item()? as f64;
                    loss = g.add(loss, ar)?;
                }
                g.backward(loss)?;
                tok += step.breakdown.token_loss;
                load += step.breakdown.load_loss;
                total += step.breakdown.total;
                for tr in &step.encoder.traces {
                    dropped += tr.dropped_slots();
                    slots += tr.dropped.len();
                }
                bind.take_grads(&mut g)
            };
            check_grads(&self.params, &grads)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            self.step += 1;
            lr = lr_at(self.step.min(self.total_steps), self.total_steps, cfg.lr, cfg.warmup_fraction)?;
            adamw_step(&mut self.params, &grads, &mut self.state, &cfg.adamw(), lr)?;
        }
        let nb = n_batches as f64;
        let (val_cer, val_wacc) = if self.valid.is_empty() {
            (None, None)
        } else {
            let (rep, _) = self.transliterator().evaluate(&self.valid)?;
            (Some(rep.cer), Some(rep.wacc))
        };
        self.epoch += 1;
        let better = match (&self.best, val_cer) {
            (None, _) | (_, None) => true,
            (Some((b, _, _)), Some(c)) => c < *b,
        };
        if better {
            self.best = Some((val_cer.unwrap_or(f64::INFINITY), self.epoch, self.params.clone()));
        }
        let m = EpochMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch: self.epoch,
            token_loss: tok / nb,
            load_loss: load / nb,
            total: total / nb,
            ar_loss: self.params.config.ar_decoder.then_some(ar_sum / nb),
            val_cer,
            val_wacc,
            dropped_token_fraction: if slots == 0 { 0.0 } else { dropped as f64 / slots as f64 },
            lr,
        };
        log::info!(
            "epoch {} loss {:.4} (token {:.4}, load {:.4}) val_cer {:?} val_wacc {:?}",
            m.epoch,
            m.total,
            m.token_loss,
            m.load_loss,
            m.val_cer,
            m.val_wacc
        );
        self.history.push(m.clone());
        Ok(m)
    }

    /// Current weights.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.params.clone(), self.src_vocab.clone(), self.tgt_vocab.clone())
    }

    /// Weights of the epoch with the lowest validation CER (earliest on
    /// ties), or the latest weights when there is no validation set.
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let params = self.best.as_ref().map_or(&self.params, |b| &b.2);
        Checkpoint::new(params.clone(), self.src_vocab.clone(), self.tgt_vocab.clone())
    }

    /// Epoch (1-based) the best checkpoint comes from.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.1)
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub skipped: usize,
}

/// Runs all epochs, calling `on_epoch` after each.
pub fn train<F>(model: &ModelConfig, config: TrainConfig, train: &[Pair], valid: &[Pair], mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer, &EpochMetrics) -> Result<()>,
{
    let mut t = Trainer::new(model, config, train, valid)?;
    for _ in 0..t.config.epochs {
        let m = t.run_epoch()?;
        on_epoch(&t, &m)?;
    }
    Ok(TrainOutcome {
        best: t.best_checkpoint()?,
        best_epoch: t.best_epoch().unwrap_or(t.epoch),
        last: t.checkpoint()?,
        history: t.history,
        skipped: t.skipped,
    })
}
