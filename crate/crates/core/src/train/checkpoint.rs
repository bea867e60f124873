//! Binary checkpoint format: an 8-byte magic, a little-endian `u32` header
//! length, a JSON header, then raw little-endian `f32` payloads in manifest
//! order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::Adam;

pub const MAGIC: &[u8; 8] = b"SEG2EYE\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Segmenter,
    Refiner,
    Gan,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Segmenter => "segmenter",
            ModelKind::Refiner => "refiner",
            ModelKind::Gan => "gan",
        })
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    optimizer_steps: BTreeMap<String, u64>,
    manifest: Vec<ManifestEntry>,
}

/// In-memory checkpoint: metadata plus named `f32` tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, model: ModelConfig, train: TrainConfig, step: u64) -> Self {
        Checkpoint { kind, model, train, step, optimizer_steps: BTreeMap::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, name: String, t: Tensor<f32>) {
        assert!(!self.index.contains_key(&name), "duplicate checkpoint tensor {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, t));
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    /// Store every entry of `store` under `<prefix>.<name>`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for e in store.entries() {
            self.push(format!("{prefix}.{}", e.name), (*e.value).clone());
        }
    }

    pub fn add_optimizer(&mut self, prefix: &str, store: &ParamStore<f32>, opt: &Adam) {
        for (e, (m, v)) in store.entries().iter().zip(opt.m.iter().zip(&opt.v)) {
            if let (Some(m), Some(v)) = (m, v) {
                self.push(format!("{prefix}.adam_m.{}", e.name), m.clone());
                self.push(format!("{prefix}.adam_v.{}", e.name), v.clone());
            }
        }
        self.optimizer_steps.insert(prefix.to_string(), opt.step);
    }

    fn lookup(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>, CheckpointError> {
        let t = self.tensor(name).ok_or_else(|| CheckpointError::ManifestMismatch(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {name} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Overwrite every entry of `store` from `<prefix>.<name>`.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}.{}", store.name(id));
            let t = self.lookup(&name, store.get(id).shape())?.clone();
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, prefix: &str, store: &ParamStore<f32>, opt: &mut Adam) -> Result<(), CheckpointError> {
        for (i, e) in store.entries().iter().enumerate() {
            if opt.m[i].is_some() {
                opt.m[i] = Some(self.lookup(&format!("{prefix}.adam_m.{}", e.name), e.value.shape())?.clone());
                opt.v[i] = Some(self.lookup(&format!("{prefix}.adam_v.{}", e.name), e.value.shape())?.clone());
            }
        }
        opt.step = *self
            .optimizer_steps
            .get(prefix)
            .ok_or_else(|| CheckpointError::ManifestMismatch(format!("missing optimizer state {prefix}")))?;
        Ok(())
    }

    pub fn expect_kind(self, kind: ModelKind) -> Result<Self, CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::KindMismatch { expected: kind, found: self.kind });
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let manifest = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            optimizer_steps: self.optimizer_steps.clone(),
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(CheckpointError::Truncated { needed, available: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(MAGIC.len())?;
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        need(12)?;
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        need(12 + hlen)?;
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found, expected: FORMAT_VERSION });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[12 + hlen..];
        let mut ck = Checkpoint::new(header.kind, header.model, header.train, header.step);
        ck.optimizer_steps = header.optimizer_steps;
        let mut expected_offset = 0u64;
        for e in header.manifest {
            if e.offset != expected_offset {
                return Err(CheckpointError::ManifestMismatch(format!("tensor {} at offset {}", e.name, e.offset)));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            if payload.len() < end {
                return Err(CheckpointError::Truncated { needed: 12 + hlen + end, available: bytes.len() });
            }
            let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            expected_offset = end as u64;
            if ck.index.contains_key(&e.name) {
                return Err(CheckpointError::ManifestMismatch(format!("duplicate tensor {}", e.name)));
            }
            ck.push(e.name, Tensor::new(&e.shape, data));
        }
        if payload.len() as u64 != expected_offset {
            return Err(CheckpointError::ManifestMismatch(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Checkpoint::from_bytes(&bytes)?)
    }

    pub fn load_kind(path: &Path, kind: ModelKind) -> Result<Self> {
        Ok(Checkpoint::load(path)?.expect_kind(kind)?)
    }

    /// Hex digest of the serialized checkpoint; identifies model weights in
    /// caches.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 7.0]), true);
        store.add("b", Tensor::new(&[2], vec![0.5, 0.25]), false);
        let mut ck = Checkpoint::new(ModelKind::Segmenter, ModelConfig::default(), TrainConfig::default(), 3);
        ck.add_store("seg", &store);
        let opt = Adam::new(&store, 1e-3, (0.9, 0.999));
        ck.add_optimizer("seg", &store, &opt);
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.step, 3);
        assert_eq!(back.kind, ModelKind::Segmenter);
        assert_eq!(back.tensor("seg.w").unwrap(), ck.tensor("seg.w").unwrap());
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT0000"), Err(CheckpointError::BadMagic)));
        let text = String::from_utf8_lossy(&bytes[12..]).into_owned();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = text[..hlen].replace("\"format_version\":1", "\"format_version\":9");
        let mut bad = bytes[..8].to_vec();
        bad.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bad.extend_from_slice(header.as_bytes());
        bad.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(ck.expect_kind(ModelKind::Gan), Err(CheckpointError::KindMismatch { .. })));
    }

    #[test]
    fn restore_checks_shapes() {
        let ck = sample();
        let mut other = ParamStore::new();
        other.add("w", Tensor::<f32>::zeros(&[3, 2]), true);
        assert!(matches!(ck.restore_store("seg", &mut other), Err(CheckpointError::ManifestMismatch(_))));
        let mut missing = ParamStore::new();
        missing.add("q", Tensor::<f32>::zeros(&[1]), true);
        assert!(matches!(ck.restore_store("seg", &mut missing), Err(CheckpointError::ManifestMismatch(_))));
    }
}
