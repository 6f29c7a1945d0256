//! Parameter layout, storage and initialization.
//!
//! [`ParamLayout`] is the single source of truth for parameter names and
//! shapes; storage, checkpoints and [`param_count`] all derive from it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};

use super::config::{AttentionVariant, FfnVariant, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the first dimension.
    Linear,
    Zeros,
    Ones,
    /// Standard normal.
    Embedding,
    /// Normal with standard deviation 0.1.
    Lambda,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Indices of one feed-forward stack `d -> e/2 -> e -> d`.
#[derive(Clone, Copy, Debug)]
pub struct StackIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
}

#[derive(Clone, Debug)]
pub enum FfnIdx {
    Dense(StackIdx),
    Moe { router: usize, experts: Vec<StackIdx> },
}

#[derive(Clone, Copy, Debug)]
pub struct DiffIdx {
    pub lambda_q1: usize,
    pub lambda_k1: usize,
    pub lambda_q2: usize,
    pub lambda_k2: usize,
    pub head_norm: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub struct LayerIdx {
    pub attn_norm: usize,
    pub attn: AttnIdx,
    pub diff: Option<DiffIdx>,
    pub ffn_norm: usize,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub struct DecoderIdx {
    pub embed: usize,
    pub self_norm: usize,
    pub self_attn: AttnIdx,
    pub cross_norm: usize,
    pub cross_attn: AttnIdx,
    pub ffn_norm: usize,
    pub ffn: StackIdx,
    pub final_norm: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub embed: usize,
    pub layers: Vec<LayerIdx>,
    pub final_norm: usize,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
    pub decoder: Option<DecoderIdx>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn stack(&mut self, p: &str, d: usize, e: usize) -> StackIdx {
        let h = e / 2;
        StackIdx {
            w1: self.add(format!("{p}.w1"), &[d, h], Init::Linear),
            b1: self.add(format!("{p}.b1"), &[h], Init::Zeros),
            w2: self.add(format!("{p}.w2"), &[h, e], Init::Linear),
            b2: self.add(format!("{p}.b2"), &[e], Init::Zeros),
            w3: self.add(format!("{p}.w3"), &[e, d], Init::Linear),
            b3: self.add(format!("{p}.b3"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{p}.wq"), &[d, d], Init::Linear),
            wk: self.add(format!("{p}.wk"), &[d, d], Init::Linear),
            wv: self.add(format!("{p}.wv"), &[d, d], Init::Linear),
            wo: self.add(format!("{p}.wo"), &[d, d], Init::Linear),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mut b = Builder { specs: Vec::new() };
        let embed = b.add("embed.src".into(), &[cfg.src_vocab_size, d], Init::Embedding);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("layers.{l}");
            let attn_norm = b.add(format!("{p}.attn_norm.gain"), &[d], Init::Ones);
            let attn = b.attn(&format!("{p}.attn"), d);
            let diff = (cfg.attention_variant == AttentionVariant::Differential).then(|| {
                let hd = [cfg.num_heads, cfg.head_dim];
                DiffIdx {
                    lambda_q1: b.add(format!("{p}.attn.lambda_q1"), &hd, Init::Lambda),
                    lambda_k1: b.add(format!("{p}.attn.lambda_k1"), &hd, Init::Lambda),
                    lambda_q2: b.add(format!("{p}.attn.lambda_q2"), &hd, Init::Lambda),
                    lambda_k2: b.add(format!("{p}.attn.lambda_k2"), &hd, Init::Lambda),
                    head_norm: b.add(
                        format!("{p}.attn.head_norm.gain"),
                        &[cfg.num_heads, 2 * cfg.head_dim],
                        Init::Ones,
                    ),
                }
            });
            let ffn_norm = b.add(format!("{p}.ffn_norm.gain"), &[d], Init::Ones);
            let ffn = match cfg.ffn_variant {
                FfnVariant::Dense => FfnIdx::Dense(b.stack(&format!("{p}.ffn"), d, cfg.expert_dim)),
                FfnVariant::Moe => FfnIdx::Moe {
                    router: b.add(format!("{p}.moe.router"), &[d, cfg.num_experts], Init::Linear),
                    experts: (0..cfg.num_experts)
                        .map(|e| b.stack(&format!("{p}.moe.experts.{e}"), d, cfg.expert_dim))
                        .collect(),
                },
            };
            layers.push(LayerIdx {
                attn_norm,
                attn,
                diff,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = b.add("final_norm.gain".into(), &[d], Init::Ones);
        let head_w1 = b.add("head.w1".into(), &[d, d], Init::Linear);
        let head_b1 = b.add("head.b1".into(), &[d], Init::Zeros);
        let head_w2 = b.add("head.w2".into(), &[d, cfg.tgt_vocab_size], Init::Linear);
        let head_b2 = b.add("head.b2".into(), &[cfg.tgt_vocab_size], Init::Zeros);
        let decoder = cfg.ar_decoder.then(|| DecoderIdx {
            embed: b.add("ar.embed.tgt".into(), &[cfg.tgt_vocab_size, d], Init::Embedding),
            self_norm: b.add("ar.self_norm.gain".into(), &[d], Init::Ones),
            self_attn: b.attn("ar.self", d),
            cross_norm: b.add("ar.cross_norm.gain".into(), &[d], Init::Ones),
            cross_attn: b.attn("ar.cross", d),
            ffn_norm: b.add("ar.ffn_norm.gain".into(), &[d], Init::Ones),
            ffn: b.stack("ar.ffn", d, cfg.expert_dim),
            final_norm: b.add("ar.final_norm.gain".into(), &[d], Init::Ones),
            out_w: b.add("ar.out.w".into(), &[d, cfg.tgt_vocab_size], Init::Linear),
            out_b: b.add("ar.out.b".into(), &[cfg.tgt_vocab_size], Init::Zeros),
        });
        ParamLayout {
            specs: b.specs,
            embed,
            layers,
            final_norm,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            decoder,
        }
    }

    pub fn count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Number of scalars in a model built from `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    ParamLayout::new(cfg).count()
}

/// All learnable tensors of one model, in layout order.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    tensors: Vec<Arc<Tensor<T>>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters; draws happen in `f64` so both precisions start
    /// from the same values for a given seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<f64> = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Embedding => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Lambda => (0..n).map(|_| 0.1 * normal.sample(&mut rng)).collect(),
                    Init::Linear => {
                        let bound = 1.0 / (s.shape[0] as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                    }
                };
                Tensor::from_f64(s.shape.clone(), &data).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(config.clone(), layout, tensors))
    }

    fn assemble(config: ModelConfig, layout: ParamLayout, tensors: Vec<Arc<Tensor<T>>>) -> Self {
        let by_name = layout.specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ModelParams {
            config,
            layout,
            tensors,
            by_name,
        }
    }

    /// Parameters from tensors listed in layout order; every shape must
    /// match the layout derived from `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} tensors, found {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (spec, (name, t)) in layout.specs.iter().zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        let tensors = tensors.into_iter().map(|(_, t)| Arc::new(t)).collect();
        Ok(Self::assemble(config, layout, tensors))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.layout.specs[i].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub(crate) fn shared(&self, i: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.tensors[i])
    }

    /// Mutable access; clones the storage first if a graph still shares it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::dim("ModelParams::set", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.layout.specs.iter().zip(&self.tensors).map(|(s, t)| (s.name.as_str(), &**t))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Bitwise equality of every tensor.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Binds parameters to one graph, creating each leaf on first use.
pub struct Binder<'p, T> {
    params: &'p ModelParams<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(params: &'p ModelParams<T>, trainable: bool) -> Self {
        Binder {
            params,
            vars: vec![None; params.len()],
            trainable,
        }
    }

    /// Binds parameter `i` to `vars[i]`, leaves the caller already placed
    /// on the graph. Their values take the place of the stored tensors.
    pub fn with_vars(params: &'p ModelParams<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Contract(format!("{} vars for {} parameters", vars.len(), params.len())));
        }
        Ok(Binder {
            params,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn config(&self) -> &'p ModelConfig {
        &self.params.config
    }

    pub fn layout(&self) -> &'p ParamLayout {
        &self.params.layout
    }

    pub fn var(&mut self, g: &mut Graph<T>, i: usize) -> Var {
        *self.vars[i].get_or_insert_with(|| g.leaf_shared(self.params.shared(i), self.trainable))
    }

    /// Gradients of every bound parameter after `g.backward`; `None` for
    /// parameters the loss never touched.
    pub fn take_grads(&self, g: &mut Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| g.take_grad(v))).collect()
    }
}
