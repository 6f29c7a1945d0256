//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Standard,
    Differential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnVariant {
    Dense,
    Moe,
}

/// Initial bias added to the learned λ of each differential-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaInit {
    Constant(f64),
    /// `0.8 - 0.6 * exp(-0.3 * layer)` for 0-based `layer`.
    Depthwise,
}

impl LambdaInit {
    pub fn value(self, layer: usize) -> f64 {
        match self {
            LambdaInit::Constant(c) => c,
            LambdaInit::Depthwise => 0.8 - 0.6 * (-0.3 * layer as f64).exp(),
        }
    }
}

/// Which target positions carry token loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EosMaskPolicy {
    /// Positions up to and including the target EOS.
    #[default]
    Target,
    /// Positions up to and including the first predicted EOS.
    Predicted,
    Union,
}

/// Dimension whose square root divides attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    #[default]
    HeadDim,
    EmbedDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Per-branch head width for differential attention, full head width
    /// for standard attention.
    pub head_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_dim: usize,
    pub capacity_factor: f64,
    pub dropout_p: f64,
    pub max_len: usize,
    pub attention_variant: AttentionVariant,
    pub ffn_variant: FfnVariant,
    pub lambda_init: LambdaInit,
    pub eos_mask_policy: EosMaskPolicy,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    #[serde(default)]
    pub score_scale: ScoreScale,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Adds a one-layer autoregressive decoder next to the parallel head.
    #[serde(default)]
    pub ar_decoder: bool,
}

fn default_rope_base() -> f64 {
    10000.0
}

/// Named architecture arms selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    Diff,
    DiffMoe,
    Ar,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "diff" => Ok(Variant::Diff),
            "diff-moe" => Ok(Variant::DiffMoe),
            "ar" => Ok(Variant::Ar),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected standard, diff, diff-moe or ar)"
            ))),
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Diff => "diff",
            Variant::DiffMoe => "diff-moe",
            Variant::Ar => "ar",
        }
    }
}

impl ModelConfig {
    /// Four layers of width 768 with eight heads and five experts.
    pub fn base(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 768,
            num_layers: 4,
            num_heads: 8,
            head_dim: 48,
            num_experts: 5,
            top_k: 2,
            expert_dim: 512,
            capacity_factor: 1.25,
            dropout_p: 0.1,
            max_len: 32,
            attention_variant: AttentionVariant::Differential,
            ffn_variant: FfnVariant::Moe,
            lambda_init: LambdaInit::Depthwise,
            eos_mask_policy: EosMaskPolicy::Target,
            src_vocab_size,
            tgt_vocab_size,
            score_scale: ScoreScale::HeadDim,
            rope_base: default_rope_base(),
            ar_decoder: false,
        }
    }

    /// Two layers of width 64 with four heads and four experts, sized for
    /// single-core training runs.
    pub fn small(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            head_dim: 8,
            num_experts: 4,
            expert_dim: 128,
            ..Self::base(src_vocab_size, tgt_vocab_size)
        }
    }

    /// `d=8, h=2, d_h=2, L=1, M_e=2, expert_dim=8`, used for exhaustive checks.
    pub fn tiny(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            head_dim: 2,
            num_experts: 2,
            expert_dim: 8,
            dropout_p: 0.0,
            max_len: 12,
            ..Self::base(src_vocab_size, tgt_vocab_size)
        }
    }

    /// Switches the architecture arm, recomputing `head_dim` for the new
    /// attention layout.
    pub fn with_variant(mut self, v: Variant) -> Self {
        let (att, ffn, ar) = match v {
            Variant::Standard => (AttentionVariant::Standard, FfnVariant::Dense, false),
            Variant::Diff => (AttentionVariant::Differential, FfnVariant::Dense, false),
            Variant::DiffMoe => (AttentionVariant::Differential, FfnVariant::Moe, false),
            Variant::Ar => (AttentionVariant::Differential, FfnVariant::Moe, true),
        };
        self.attention_variant = att;
        self.ffn_variant = ffn;
        self.ar_decoder = ar;
        self.head_dim = self.embed_dim / self.branches() / self.num_heads.max(1);
        self
    }

    /// The arm this configuration corresponds to, if any.
    pub fn variant(&self) -> Option<Variant> {
        match (self.attention_variant, self.ffn_variant, self.ar_decoder) {
            (AttentionVariant::Standard, FfnVariant::Dense, false) => Some(Variant::Standard),
            (AttentionVariant::Differential, FfnVariant::Dense, false) => Some(Variant::Diff),
            (AttentionVariant::Differential, FfnVariant::Moe, false) => Some(Variant::DiffMoe),
            (AttentionVariant::Differential, FfnVariant::Moe, true) => Some(Variant::Ar),
            _ => None,
        }
    }

    /// Query/key branches per head: 2 for differential attention.
    pub fn branches(&self) -> usize {
        match self.attention_variant {
            AttentionVariant::Standard => 1,
            AttentionVariant::Differential => 2,
        }
    }

    /// Width of each decoder attention head, `d / h`.
    pub fn decoder_head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn score_dim(&self) -> usize {
        match self.score_scale {
            ScoreScale::HeadDim => self.head_dim,
            ScoreScale::EmbedDim => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return bad("embed_dim, num_heads and head_dim must be positive".into());
        }
        if self.branches() * self.num_heads * self.head_dim != self.embed_dim {
            return bad(format!(
                "{:?} attention needs {} * num_heads * head_dim == embed_dim, got {} * {} * {} != {}",
                self.attention_variant,
                self.branches(),
                self.branches(),
                self.num_heads,
                self.head_dim,
                self.embed_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("rotary embeddings need an even head_dim, got {}", self.head_dim));
        }
        if self.ar_decoder && (self.embed_dim % self.num_heads != 0 || self.decoder_head_dim() % 2 != 0) {
            return bad("decoder heads need embed_dim / num_heads to be even".into());
        }
        if self.ffn_variant == FfnVariant::Moe {
            if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
                return bad(format!(
                    "need 1 <= top_k <= num_experts, got top_k {} with {} experts",
                    self.top_k, self.num_experts
                ));
            }
            if self.capacity_factor.is_nan() || self.capacity_factor < 1.0 {
                return bad(format!("capacity_factor must be >= 1, got {}", self.capacity_factor));
            }
        }
        if self.expert_dim < 2 || self.expert_dim % 2 != 0 {
            return bad(format!("expert_dim must be even and >= 2, got {}", self.expert_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.src_vocab_size <= crate::tokenizer::NUM_SPECIAL || self.tgt_vocab_size <= crate::tokenizer::NUM_SPECIAL {
            return bad("vocabularies must contain at least one symbol besides PAD, UNK and EOS".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }
}
