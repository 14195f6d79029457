//! Binary checkpoint format.
//!
//! Layout: the magic `QGCACKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order. Adam moments are stored as
//! tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::model::Qgca;
use crate::tensor::{AdamState, ParamStore, Tensor};
use crate::text::Vocabulary;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"QGCACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || CheckpointError::Corrupt(format!("invalid RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad().into());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vocabulary,
    epoch: usize,
    optimizer: Option<OptimizerInfo>,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    /// Epochs completed when the parameters were captured.
    pub epoch: usize,
    pub optimizer: Option<(OptimizerInfo, AdamState)>,
    pub rng: RngState,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<&[f64]> = Vec::new();
        for p in self.params.iter() {
            entries.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            });
            payload.push(p.tensor.data());
        }
        if let Some((_, state)) = &self.optimizer {
            for (prefix, moments) in [(M_PREFIX, &state.m), (V_PREFIX, &state.v)] {
                for (p, values) in self.params.iter().zip(moments) {
                    entries.push(TensorEntry {
                        name: format!("{prefix}{}", p.name),
                        shape: p.tensor.shape().to_vec(),
                        trainable: false,
                    });
                    payload.push(values);
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(|(info, _)| *info),
            rng: self.rng.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("encoding checkpoint header", e))?;
        let total: usize = payload.iter().map(|p| p.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for values in payload {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |start: usize, len: usize, what: &str| -> Result<&[u8]> {
            bytes
                .get(start..start.saturating_add(len))
                .ok_or_else(|| CheckpointError::Truncated(format!("missing {what}")).into())
        };
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated("missing magic".into()).into());
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(take(8, 4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let header_len = u64::from_le_bytes(take(12, 8, "header length")?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Corrupt("header length overflows".into()))?;
        let header: Header = serde_json::from_slice(take(20, header_len, "header")?)
            .map_err(|e| CheckpointError::Corrupt(format!("header JSON: {e}")))?;
        let mut offset = 20 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{}` is too large", entry.name)))?;
            let raw = take(offset, n, &format!("values of `{}`", entry.name))?;
            offset += n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((entry, Tensor::new(entry.shape.clone(), data)?));
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - offset)).into());
        }

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (entry, t) in tensors {
            if entry.name.starts_with(M_PREFIX) {
                m.push(t.to_vec());
            } else if entry.name.starts_with(V_PREFIX) {
                v.push(t.to_vec());
            } else {
                params
                    .add(entry.name.clone(), t, entry.trainable)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            }
        }
        let optimizer = match header.optimizer {
            Some(info) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(CheckpointError::Corrupt("optimizer moments do not cover every parameter".into()).into());
                }
                Some((info, AdamState { m, v, step: info.step }))
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(CheckpointError::Corrupt("optimizer moments without optimizer info".into()).into()),
        };
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            params,
            epoch: header.epoch,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn model(&self) -> Result<Qgca> {
        Qgca::with_params(self.config.model.clone(), self.params.clone())
    }
}
