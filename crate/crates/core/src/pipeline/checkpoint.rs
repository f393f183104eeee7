//! Checkpoint container.
//!
//! ```text
//! magic (8 bytes) | header length (u32 LE) | header JSON | f64 LE blobs
//! ```
//!
//! The header lists every tensor with its shape and byte offset into the
//! blob section, in name order: parameters, then Adam first and second
//! moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, InferenceModel, Model, ModelConfig, TrainConfig, TrainState, POSENET_PREFIX};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFNCKPT\0";
pub const CHECKPOINT_VERSION: &str = "ckpt-1";
const DTYPE: &str = "f64le";
const MAX_HEADER: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_state(model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            model: model.clone(),
            train: Some(train.clone()),
            step: state.step,
            params: state.params.clone(),
            adam: state.adam.clone(),
        }
    }

    /// A checkpoint holding only initial parameters.
    pub fn initial(model: &ModelConfig, seed: u64) -> Result<Self> {
        let m = Model::new(model)?;
        Ok(Checkpoint {
            model: model.clone(),
            train: None,
            step: 0,
            params: m.initialize(seed),
            adam: AdamState::new(),
        })
    }

    /// The DeFNet-only view used for forecasting.
    pub fn inference_view(&self) -> Result<InferenceModel> {
        InferenceModel::new(&self.model, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<u8> = Vec::new();
        let mut push = |name: &str, kind: Kind, t: &Tensor| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                dtype: DTYPE.to_string(),
                offset: blobs.len() as u64,
            });
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(name, Kind::Param, t);
        }
        for (name, t) in &self.adam.m {
            push(name, Kind::AdamM, t);
        }
        for (name, t) in &self.adam.v {
            push(name, Kind::AdamV, t);
        }
        let header = Header {
            version: CHECKPOINT_VERSION.to_string(),
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            adam_step: self.adam.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if hlen > MAX_HEADER || 12 + hlen > bytes.len() {
            return Err(bad(format!("header length {hlen} exceeds file size {}", bytes.len())));
        }
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| bad(format!("header: {e}")))?;
        let blobs = &bytes[12 + hlen..];
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            step: header.adam_step,
            ..AdamState::new()
        };
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.dtype != DTYPE {
                return Err(bad(format!("tensor {} has dtype {:?}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if e.offset != expected_offset || start + 8 * n > blobs.len() {
                return Err(bad(format!("tensor {} is truncated or misplaced", e.name)));
            }
            expected_offset += 8 * n as u64;
            let data: Vec<f64> = blobs[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(&e.shape, data).map_err(|err| bad(err.to_string()))?;
            match e.kind {
                Kind::Param => params.insert(e.name.clone(), t),
                Kind::AdamM => {
                    adam.m.insert(e.name.clone(), t);
                }
                Kind::AdamV => {
                    adam.v.insert(e.name.clone(), t);
                }
            }
        }
        if expected_offset as usize != blobs.len() {
            return Err(bad(format!(
                "blob section is {} bytes, header describes {expected_offset}",
                blobs.len()
            )));
        }
        let ck = Checkpoint {
            model: header.model,
            train: header.train,
            step: header.step,
            params,
            adam,
        };
        ck.validate().map_err(|e| bad(e.to_string()))?;
        Ok(ck)
    }

    /// Every DeFNet parameter must be present; the pose network is all or
    /// nothing; unknown names and shape mismatches are rejected.
    pub fn validate(&self) -> Result<()> {
        let model = Model::new(&self.model)?;
        self.params.check(&model.defnet_specs())?;
        let pose_prefix = format!("{POSENET_PREFIX}.");
        let has_pose = self.params.names().any(|n| n.starts_with(&pose_prefix));
        let specs = if has_pose { model.specs() } else { model.defnet_specs() };
        self.params.check(&specs)?;
        if self.params.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.params.names().find(|n| !known.contains(n.as_str()));
            return Err(Error::invalid(format!("unexpected parameter {extra:?}")));
        }
        for (name, t) in self.adam.m.iter().chain(&self.adam.v) {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::invalid(format!("optimiser state for unknown or misshapen {name:?}"))),
            }
        }
        Ok(())
    }

    /// Copy without pose network parameters or optimiser state.
    pub fn stripped(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            params: self.params.without_prefix(&format!("{POSENET_PREFIX}.")),
            adam: AdamState::new(),
        }
    }
}

/// Atomic write (temporary file, then rename).
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &ck.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
