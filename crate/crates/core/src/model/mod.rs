//! The transliteration network and its ablation arms.

pub mod ar;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod moe;
pub mod params;

pub use ar::{ar_generate, ar_generate_cached, ar_token_loss, decoder_forward, decoder_memory};
pub use attention::{diff_attention, key_extent, multi_head, standard_attention, DiffAttnOut, NORM_EPS};
pub use checkpoint::{Checkpoint, ManifestEntry, FORMAT_VERSION, MAGIC};
pub use config::{AttentionVariant, EosMaskPolicy, FfnVariant, LambdaInit, ModelConfig, ScoreScale, Variant};
pub use encoder::{argmax_rows, encoder_forward, nar_generate, nar_head, sharded, slice_rows, EncoderOut, Generation};
pub use moe::{capacity, dense_ffn_forward, moe_forward, stack_forward, top_k, MoeOut, RoutingTrace};
pub use params::{param_count, Binder, ModelParams, ParamLayout, ParamSpec};
