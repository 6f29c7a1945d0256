//! Non-autoregressive character transliteration.
//!
//! The encoder stacks differential-attention layers with top-2
//! mixture-of-experts feed-forward blocks, and a position-wise MLP head
//! predicts every output character in one pass. Output length is implied by
//! the first predicted end-of-sequence symbol.
//!
//! Numeric code is generic over [`numcore::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used for training (`f32`) and for
//! gradient verification (`f64`).

pub mod bench;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type Graph64 = numcore::Graph<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
