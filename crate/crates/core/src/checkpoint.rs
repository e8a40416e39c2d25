//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "PTCK"
//! version      u32      currently 1
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON (see `Metadata`)
//! num_arrays   u32
//! per array:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   data       prod(dims) × f64
//! ```
//!
//! Weight arrays use the dotted parameter names (`input.w1`,
//! `layers.0.attn.wq`, ...). Optimizer moments, when present, are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::training::{AdamState, Normalization, TrainConfig};

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// JSON block stored after the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub model: ModelConfig,
    pub normalization: Normalization,
    /// Completed training steps.
    pub step: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Adam update counter when moments are stored.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub normalization: Normalization,
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, weights: ModelWeights, normalization: Normalization) -> Self {
        Self {
            config,
            weights,
            normalization,
            step: 0,
            train: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Metadata {
            model: self.config.clone(),
            normalization: self.normalization,
            step: self.step,
            train: self.train.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        })?;
        let mut arrays: Vec<(String, &Tensor)> = self.weights.named();
        if let Some(opt) = &self.optimizer {
            arrays.extend(opt.m.named().into_iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
            arrays.extend(opt.v.named().into_iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = usize::try_from(read_u64(&mut r)?).map_err(|_| fmt("metadata length overflows"))?;
        let meta: Metadata = serde_json::from_slice(take(&mut r, meta_len)?)?;
        meta.model.validate()?;

        let count = read_u32(&mut r)? as usize;
        let mut arrays: HashMap<String, Tensor> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| fmt("array name is not UTF-8"))?
                .to_string();
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(usize::try_from(read_u64(&mut r)?).map_err(|_| fmt("dimension overflows"))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt("array size overflows"))?;
            let raw = take(&mut r, n.checked_mul(8).ok_or_else(|| fmt("array size overflows"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| fmt(&e.to_string()))?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(fmt(&format!("duplicate array {name}")));
            }
        }
        if !r.is_empty() {
            return Err(fmt(&format!("{} trailing bytes", r.len())));
        }

        let weights = fill(&meta.model, &mut arrays, "")?;
        let optimizer = match meta.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: fill(&meta.model, &mut arrays, "adam.m/")?,
                v: fill(&meta.model, &mut arrays, "adam.v/")?,
            }),
            None => None,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(fmt(&format!("unexpected array {extra}")));
        }
        Ok(Self {
            config: meta.model,
            weights,
            normalization: meta.normalization,
            step: meta.step,
            train: meta.train,
            optimizer,
        })
    }

    /// Writes to a temporary sibling and renames, so an interrupted save
    /// never leaves a truncated file at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn fmt(m: &str) -> CheckpointError {
    CheckpointError::Format(m.to_string())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(fmt("unexpected end of file"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

/// Moves the arrays named `prefix + <param>` into a weight set.
fn fill(config: &ModelConfig, arrays: &mut HashMap<String, Tensor>, prefix: &str) -> Result<ModelWeights> {
    let mut w = ModelWeights::zeros(config)?;
    let mut err = None;
    w.for_each_mut(|name, slot| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match arrays.remove(&key) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => err = Some(fmt(&format!("{key}: shape {:?}, expected {:?}", t.shape(), slot.shape()))),
            None => err = Some(fmt(&format!("missing array {key}"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(w),
    }
}
