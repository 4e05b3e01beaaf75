//! Versioned binary checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` version, a little-endian `u64`
//! header length, the JSON header, then every tensor as raw little-endian
//! `f32` values in the order the header's tensor table declares.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelSpec, SegModel};
use crate::backbone::BackboneParams;
use crate::embeddings::ClassRegistry;
use crate::error::{Error, Result};
use crate::heads::{head_param_layout, HypernetMlp};
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    stage: usize,
    rng: SplitMix64,
    registry: ClassRegistry,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
}

/// Names and buffers in declared order: backbone, hypernets, class embeddings.
fn named_tensors(model: &SegModel<f32>) -> Vec<(String, &Vec<f32>)> {
    let mut out: Vec<(String, &Vec<f32>)> = model
        .backbone
        .tensor_names()
        .into_iter()
        .zip(model.backbone.tensors())
        .collect();
    for (desc, h) in model.registry.classes.iter().zip(&model.hypernets) {
        for (name, t) in HypernetMlp::<f32>::TENSOR_NAMES.iter().zip(h.tensors()) {
            out.push((format!("hypernet.{}.{name}", desc.id), t));
        }
    }
    for desc in &model.registry.classes {
        out.push((format!("embedding.{}", desc.id), &desc.embedding));
    }
    out
}

pub fn checkpoint_to_bytes(model: &SegModel<f32>) -> Vec<u8> {
    let tensors = named_tensors(model);
    let header = Header {
        spec: model.spec.clone(),
        seed: model.seed,
        stage: model.stage,
        rng: model.rng,
        registry: model.registry.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, field: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(field, format!("truncated: need {n} bytes at offset {pos}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<SegModel<f32>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "version",
            format!("expected {CHECKPOINT_VERSION}, found {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut pos, 8, "header_len")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::format("header_len", "too large"))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, header_len, "header")?)
        .map_err(|e| Error::format("header", e.to_string()))?;
    header
        .spec
        .validate()
        .map_err(|e| Error::format("header.spec", e.to_string()))?;

    let n_classes = header.registry.classes.len();
    let layout = head_param_layout(header.spec.dims.decoder_channels(), header.spec.head_kernel)?;
    let in_dim = header.spec.dims.encoder_channels() + header.registry.dim;
    let mut model = SegModel {
        spec: header.spec.clone(),
        backbone: BackboneParams::zeros(header.spec.dims.clone()),
        registry: header.registry,
        hypernets: (0..n_classes)
            .map(|_| HypernetMlp::zeros(in_dim, header.spec.hidden, layout.total))
            .collect(),
        layout,
        seed: header.seed,
        stage: header.stage,
        rng: header.rng,
    };
    let dim = model.registry.dim;
    for desc in &mut model.registry.classes {
        desc.embedding = vec![0.0; dim];
    }

    let expected: Vec<TensorEntry> = named_tensors(&model)
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            len: t.len(),
        })
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::format(
            "tensors",
            format!("expected {} tensors, found {}", expected.len(), header.tensors.len()),
        ));
    }
    for (e, h) in expected.iter().zip(&header.tensors) {
        if e != h {
            return Err(Error::format(
                format!("tensors.{}", h.name),
                format!("expected {} of length {}", e.name, e.len),
            ));
        }
    }

    let mut values = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let field = format!("tensors.{}", entry.name);
        let raw = take(bytes, &mut pos, entry.len * 4, &field)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(field, "non-finite value"));
        }
        values.push(v);
    }
    if pos != bytes.len() {
        return Err(Error::format("tensors", format!("{} trailing bytes", bytes.len() - pos)));
    }
    // Same order as `named_tensors`: trainable buffers first, then embeddings.
    let mut values = values.into_iter();
    for buf in model.param_tensors_mut() {
        *buf = values.next().expect("tensor count checked");
    }
    for desc in &mut model.registry.classes {
        desc.embedding = values.next().expect("tensor count checked");
    }
    Ok(model)
}

/// Hex SHA-256 of the checkpoint encoding; identifies the producing model.
pub fn checkpoint_hash(model: &SegModel<f32>) -> String {
    hex_digest(&checkpoint_to_bytes(model))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the checkpoint and returns its hash.
pub fn save_checkpoint(model: &SegModel<f32>, path: &Path) -> Result<String> {
    let bytes = checkpoint_to_bytes(model);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{ClassDescriptor, EmbeddingSource};
    use crate::model::tests::tiny_spec;
    use crate::ClassId;

    fn model() -> SegModel<f32> {
        let src = EmbeddingSource::Hash { dim: 4, seed: 1 };
        let mut m = SegModel::new(tiny_spec(), ClassRegistry::new(4, "hash"), 9).unwrap();
        m.extend(vec![
            ClassDescriptor::new(ClassId(0), "liver", 1, &src).unwrap(),
            ClassDescriptor::new(ClassId(3), "tumor", 2, &src).unwrap(),
        ])
        .unwrap();
        m.stage = 2;
        m.rng.next_u64();
        m
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let m = model();
        let bytes = checkpoint_to_bytes(&m);
        assert_eq!(&bytes[..8], &CHECKPOINT_MAGIC);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = checkpoint_to_bytes(&model());
        let field_of = |b: &[u8]| match checkpoint_from_bytes(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert_eq!(field_of(&bad), "magic");
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert_eq!(field_of(&bad), "version");
        let mut bad = bytes.clone();
        bad[20] = b'#';
        assert_eq!(field_of(&bad), "header");
        assert!(field_of(&bytes[..bytes.len() - 2]).starts_with("tensors."));
    }

    #[test]
    fn save_returns_content_hash() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let h = save_checkpoint(&m, &path).unwrap();
        assert_eq!(h, checkpoint_hash(&m));
        assert_eq!(h.len(), 64);
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
