//! Binary checkpoint files.
//!
//! Layout: the bytes `NADR`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 JSON header holding the model
//! configuration, both vocabularies and a tensor manifest, then every tensor
//! as little-endian `f32` values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numcore::Tensor;
use crate::tokenizer::Vocab;

use super::config::ModelConfig;
use super::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"NADR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor data.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    tensors: Vec<ManifestEntry>,
}

/// A trained model together with the vocabularies it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, src_vocab: Vocab, tgt_vocab: Vocab) -> Result<Self> {
        let c = &params.config;
        if c.src_vocab_size != src_vocab.len() || c.tgt_vocab_size != tgt_vocab.len() {
            return Err(Error::Checkpoint(format!(
                "config vocab sizes {}/{} disagree with vocabularies of {}/{}",
                c.src_vocab_size,
                c.tgt_vocab_size,
                src_vocab.len(),
                tgt_vocab.len()
            )));
        }
        Ok(Checkpoint {
            params,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.params.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let data = &bytes[16 + hlen..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != expected {
                return Err(Error::Checkpoint(format!("tensor {} has offset {}, expected {expected}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let lo = e.offset as usize;
            let raw = data
                .get(lo..lo + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
            expected += 4 * n as u64;
        }
        if expected as usize != data.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected as usize
            )));
        }
        let params = ModelParams::from_tensors(header.config, tensors).map_err(|e| match e {
            Error::Config(m) => Error::Checkpoint(format!("invalid config: {m}")),
            e => e,
        })?;
        Checkpoint::new(params, header.src_vocab, header.tgt_vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
