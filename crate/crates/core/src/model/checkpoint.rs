//! Checkpoint directories.
//!
//! A checkpoint is a directory with two files:
//!
//! * `spec.json`: `{"format_version", "spec", "regime", "training", "frozen_layers"}`
//!   where `spec` is the [`ModelSpec`], `training` holds the seed and epoch
//!   count, and `frozen_layers` lists layers whose trainable flag is off.
//! * `weights.bin`, little-endian throughout:
//!
//! ```text
//! magic            4 bytes   "RGWB"
//! format_version   u32
//! tensor_count     u32
//! per tensor:
//!   name_len       u32
//!   name           name_len bytes, UTF-8 (e.g. "features.norm5.running_var")
//!   ndim           u32
//!   dims           ndim × u64
//!   values         prod(dims) × f32
//! checksum         32 bytes, SHA-256 of everything before it
//! ```
//!
//! Tensors appear in network order and cover every learnable tensor and
//! batch-norm running statistic. Readers reject any `format_version` other
//! than [`CHECKPOINT_FORMAT_VERSION`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenseNetConfig, ModelHandle, ModelSpec};
use crate::error::{Error, Result};
use crate::labels::Regime;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const SPEC_FILE: &str = "spec.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MAGIC: &[u8; 4] = b"RGWB";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub regime: Regime,
    pub training: TrainingFingerprint,
    #[serde(default)]
    pub frozen_layers: Vec<String>,
}

pub fn save_checkpoint(model: &ModelHandle, regime: Regime, training: TrainingFingerprint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: model.spec().clone(),
        regime,
        training,
        frozen_layers: model
            .trainable_flags()
            .into_iter()
            .filter(|(_, t)| !t)
            .map(|(n, _)| n)
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Other(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let tensors = model.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, p) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &buf).map_err(|e| Error::io(&weights, e))?;
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelHandle, CheckpointMeta)> {
    let spec_path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: spec_path.clone(),
        message: e.to_string(),
    })?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint {
            path: spec_path.clone(),
            message: "missing format_version".into(),
        })?;
    if found != u64::from(CHECKPOINT_FORMAT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: found.min(u64::from(u32::MAX)) as u32,
            supported: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(value).map_err(|e| Error::Checkpoint {
        path: spec_path.clone(),
        message: e.to_string(),
    })?;
    meta.spec.validate()?;

    let weights = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    let corrupt = |message: String| Error::Checkpoint {
        path: weights.clone(),
        message,
    };
    if bytes.len() < MAGIC.len() + 8 + CHECKSUM_LEN {
        return Err(corrupt("file is truncated".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(corrupt("checksum mismatch (file is corrupt or truncated)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(corrupt("not a weights file".into()));
    }
    let version = r.u32().ok_or_else(|| corrupt("truncated header".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let count = r.u32().ok_or_else(|| corrupt("truncated header".into()))? as usize;

    let mut model = ModelHandle::random(meta.spec.clone(), DenseNetConfig::densenet121(), 0);
    let mut tensors = model.named_tensors_mut();
    if count != tensors.len() {
        return Err(corrupt(format!("expected {} tensors, found {count}", tensors.len())));
    }
    for (name, param) in tensors.iter_mut() {
        let truncated = || corrupt(format!("truncated at tensor {name}"));
        let len = r.u32().ok_or_else(truncated)? as usize;
        let stored = r.take(len).ok_or_else(truncated)?;
        if stored != name.as_bytes() {
            return Err(corrupt(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(stored)
            )));
        }
        let ndim = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        if shape != param.shape {
            return Err(corrupt(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                param.shape
            )));
        }
        let data = r.take(param.len() * 4).ok_or_else(truncated)?;
        for (dst, chunk) in param.value.iter_mut().zip(data.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    drop(tensors);
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after last tensor".into()));
    }
    for layer in meta.frozen_layers.iter() {
        model.set_trainable_exact(layer, false);
    }
    Ok((model, meta))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
