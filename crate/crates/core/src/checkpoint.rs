//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "BISSCKPT"
//! version      u32
//! dtype        u8       4 = f32, 8 = f64
//! manifest_len u64
//! manifest     JSON     run state, parameter names and shapes
//! payload      floats   parameters, then Adam first moments, then second moments,
//!                       each in manifest order
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, Param, Seq2Seq};
use crate::optim::Adam;
use crate::tensor::{DType, Real, Tensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"BISSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores {found:?} values, expected {expected:?}")]
    DType { expected: DType, found: DType },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Serialized position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: JSON numbers cannot hold a u128 exactly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad rng position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: DType,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_hash: String,
    pub global_step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub adam_step: u64,
    pub dropout_rng: RngState,
    pub loss_trace: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<R> {
    pub manifest: Manifest,
    pub params: Vec<Param<R>>,
    pub adam_m: Vec<Vec<R>>,
    pub adam_v: Vec<Vec<R>>,
}

impl<R: Real> Checkpoint<R> {
    pub fn model(&self) -> std::result::Result<Seq2Seq<R>, crate::model::ModelError> {
        Seq2Seq::from_params(self.manifest.model.clone(), self.params.clone())
    }

    pub fn adam(&self) -> Adam<R> {
        Adam {
            config: self.manifest.train.optimizer.clone(),
            step: self.manifest.adam_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(R::DTYPE.tag());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in &self.params {
            p.tensor.data().iter().for_each(|v| v.write_le(&mut out));
        }
        for buf in self.adam_m.iter().chain(&self.adam_v) {
            buf.iter().for_each(|v| v.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = read_header(bytes)?;
        if manifest.dtype != R::DTYPE {
            return Err(CheckpointError::DType {
                expected: R::DTYPE,
                found: manifest.dtype,
            });
        }
        let width = match R::DTYPE {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let counts: Vec<usize> = manifest.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let total: usize = counts.iter().sum();
        if payload.len() != 3 * total * width {
            return Err(CheckpointError::Malformed(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                3 * total * width
            )));
        }
        let mut offset = 0;
        let mut take = |n: usize| -> Vec<R> {
            let v = payload[offset..offset + n * width]
                .chunks(width)
                .map(R::read_le)
                .collect();
            offset += n * width;
            v
        };
        let mut params = Vec::with_capacity(counts.len());
        for (entry, &n) in manifest.tensors.iter().zip(&counts) {
            let tensor = Tensor::new(entry.shape.clone(), take(n))
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?
                .with_requires_grad(true);
            params.push(Param {
                name: entry.name.clone(),
                tensor,
            });
        }
        let adam_m = counts.iter().map(|&n| take(n)).collect();
        let adam_v = counts.iter().map(|&n| take(n)).collect();
        Ok(Self {
            manifest,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|source| io_err(path, source))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable dump: the manifest followed by every parameter value.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        for p in &self.params {
            s.push_str(&format!("# {} {:?}\n", p.name, p.tensor.shape()));
            let values: Vec<String> = p.tensor.data().iter().map(|v| format!("{:e}", v.to_f64().unwrap_or(f64::NAN))).collect();
            s.push_str(&values.join(" "));
            s.push('\n');
        }
        s
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 21 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let dtype = DType::from_tag(bytes[12])
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype tag {}", bytes[12])))?;
    let len = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
    let body = &bytes[21..];
    if body.len() < len {
        return Err(CheckpointError::Malformed("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.dtype != dtype {
        return Err(CheckpointError::Malformed("header and manifest disagree on dtype".into()));
    }
    Ok((manifest, &body[len..]))
}

/// Reads only the manifest, whatever the stored precision.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
    Ok(read_header(&bytes)?.0)
}
