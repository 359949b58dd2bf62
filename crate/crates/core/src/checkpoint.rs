//! Bit-exact binary container for model weights and task vectors.
//!
//! Layout: magic `ULKT` (4 bytes) · format version as u32 LE · manifest
//! length as u64 LE · manifest as UTF-8 JSON
//! `{config, kind, tensors: [{name, shape, offset}]}` sorted by tensor name ·
//! raw tensor data as little-endian f32, concatenated in manifest order.
//! `offset` is the byte offset of a tensor within the data section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ULKT";
pub const FORMAT_VERSION: u32 = 1;

/// What the container holds; stored in the manifest `kind` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Model,
    TaskVector,
}

impl ContainerKind {
    fn as_str(self) -> &'static str {
        match self {
            ContainerKind::Model => "model",
            ContainerKind::TaskVector => "task_vector",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(ContainerKind::Model),
            "task_vector" => Ok(ContainerKind::TaskVector),
            other => Err(Error::CheckpointFormat(format!("unknown kind {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    kind: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Serialize a name→tensor map. Shared by model checkpoints and task vectors.
pub(crate) fn encode_container(
    config: &ModelConfig,
    kind: ContainerKind,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let manifest = Manifest {
        config: config.clone(),
        kind: kind.as_str().to_string(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode_container(
    bytes: &[u8],
) -> Result<(ModelConfig, ContainerKind, BTreeMap<String, Tensor>)> {
    let fail = |msg: &str| Error::CheckpointFormat(msg.to_string());

    if bytes.len() < 16 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(manifest_len)
        .ok_or_else(|| fail("manifest length overflow"))?;
    if bytes.len() < data_start {
        return Err(fail("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])?;
    let kind = ContainerKind::parse(&manifest.kind)?;
    manifest.config.validate()?;

    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    let mut prev_name: Option<&str> = None;
    for entry in &manifest.tensors {
        if let Some(prev) = prev_name {
            if entry.name.as_str() <= prev {
                return Err(fail("manifest tensors not sorted by name"));
            }
        }
        prev_name = Some(&entry.name);
        if entry.offset != expected_offset {
            return Err(Error::CheckpointFormat(format!(
                "tensor {}: offset {} (expected {expected_offset})",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let byte_len = 4 * numel;
        let start = entry.offset as usize;
        let end = start + byte_len;
        if end > data.len() {
            return Err(fail("truncated tensor data"));
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), values)?;
        t.assert_finite(&format!("checkpoint tensor {}", entry.name))?;
        tensors.insert(entry.name.clone(), t);
        expected_offset += byte_len as u64;
    }
    if data.len() as u64 != expected_offset {
        return Err(fail("trailing bytes after tensor data"));
    }
    if tensors.len() != manifest.tensors.len() {
        return Err(fail("duplicate tensor names in manifest"));
    }
    Ok((manifest.config, kind, tensors))
}

/// Structure check shared by model checkpoints and task vectors: names and
/// shapes must exactly match what the config dictates.
pub(crate) fn check_structure(
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let expected = config.parameter_shapes();
    if tensors.len() != expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} tensors in container, config requires {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        match tensors.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name}: shape {:?} does not match config shape {shape:?}",
                    t.shape()
                )))
            }
            None => {
                return Err(Error::CheckpointFormat(format!("missing tensor {name}")))
            }
        }
    }
    Ok(())
}

/// Serialize a model checkpoint.
pub fn save_checkpoint(params: &ParameterSet) -> Result<Vec<u8>> {
    let tensors: BTreeMap<String, Tensor> =
        params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    encode_container(params.config(), ContainerKind::Model, &tensors)
}

/// Deserialize and validate a model checkpoint.
pub fn load_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    let (config, kind, tensors) = decode_container(bytes)?;
    if kind != ContainerKind::Model {
        return Err(Error::CheckpointFormat(format!(
            "expected a model checkpoint, found kind {:?}",
            kind.as_str()
        )));
    }
    check_structure(&config, &tensors)?;
    ParameterSet::new(config, tensors)
}

pub fn save_checkpoint_file(params: &ParameterSet, path: &Path) -> Result<()> {
    fs::write(path, save_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint_file(path: &Path) -> Result<ParameterSet> {
    load_checkpoint(&fs::read(path)?)
}
