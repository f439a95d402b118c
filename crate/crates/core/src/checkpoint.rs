//! Binary container for model and adapter weights.
//!
//! Layout: the magic bytes `SCLP`, a little-endian `u16` format version, a
//! little-endian `u32` manifest length, the UTF-8 JSON manifest, then the raw
//! little-endian `f32` payload. The manifest records each tensor's name,
//! shape, byte offset into the payload and element count.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lora::{AdapterDims, LoraAdapterSet};
use crate::model::{ModelConfig, Tokenizer, TransformerModel};
use crate::tensor::{Scalar, Tensor};
use crate::util;

pub const MAGIC: &[u8; 4] = b"SCLP";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

pub const KIND_MODEL: &str = "model";
pub const KIND_ADAPTERS: &str = "adapters";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode<'a, T: Scalar>(
    kind: &str,
    meta: Value,
    tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
            count: t.numel(),
        });
        for &x in t.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        kind: kind.to_string(),
        meta,
        tensors: entries,
    })
    .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
    let len = u32::try_from(manifest.len())
        .map_err(|_| Error::Contract("manifest longer than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing SCLP magic bytes".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption("header truncated".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let mlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let manifest_bytes = bytes
        .get(HEADER_LEN..HEADER_LEN + mlen)
        .ok_or_else(|| Error::Corruption("manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Corruption(format!("manifest: {e}")))?;
    let payload = &bytes[HEADER_LEN + mlen..];

    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if numel != e.count || e.offset != expected_offset {
            return Err(Error::Corruption(format!(
                "tensor {} has shape {:?}, count {} and offset {}",
                e.name, e.shape, e.count, e.offset
            )));
        }
        let end = e.offset + 4 * e.count;
        let raw = payload.get(e.offset..end).ok_or_else(|| {
            Error::Corruption(format!("payload truncated inside tensor {}", e.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(Error::Corruption(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(Container {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found {}",
            c.kind
        )));
    }
    Ok(())
}

fn meta_field<T: for<'de> Deserialize<'de>>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Corruption(format!("manifest meta lacks {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Corruption(format!("meta {key}: {e}")))
}

fn cast_all<T: Scalar>(tensors: Vec<(String, Tensor<f32>)>) -> Vec<(String, Tensor<T>)> {
    tensors.into_iter().map(|(n, t)| (n, t.cast())).collect()
}

pub fn model_to_bytes<T: Scalar>(model: &TransformerModel<T>) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "config": model.config(),
        "tokenizer": model.tokenizer(),
    });
    let named = model.named_params();
    encode(KIND_MODEL, meta, named.into_iter().map(|(n, p)| (n, &**p)))
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TransformerModel<T>> {
    let c = decode(bytes)?;
    expect_kind(&c, KIND_MODEL)?;
    let config: ModelConfig = meta_field(&c.meta, "config")?;
    let tokenizer: Tokenizer = meta_field(&c.meta, "tokenizer")?;
    TransformerModel::from_named(config, tokenizer, cast_all(c.tensors))
}

pub fn save_model<T: Scalar>(model: &TransformerModel<T>, path: &Path) -> Result<()> {
    util::write_bytes(path, model_to_bytes(model)?)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<TransformerModel<T>> {
    model_from_bytes(&util::read_bytes(path)?)
}

pub fn adapters_to_bytes<T: Scalar>(adapters: &LoraAdapterSet<T>) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "rank": adapters.rank(),
        "alpha": adapters.alpha(),
        "task_label": adapters.task_label(),
        "dims": adapters.dims(),
    });
    encode(KIND_ADAPTERS, meta, adapters.named_tensors())
}

/// Decodes an adapter set. When `expect` is given, the stored model
/// dimensions must match it.
pub fn adapters_from_bytes<T: Scalar>(
    bytes: &[u8],
    expect: Option<&ModelConfig>,
) -> Result<LoraAdapterSet<T>> {
    let c = decode(bytes)?;
    expect_kind(&c, KIND_ADAPTERS)?;
    let rank: usize = meta_field(&c.meta, "rank")?;
    let alpha: f64 = meta_field(&c.meta, "alpha")?;
    let task_label: String = meta_field(&c.meta, "task_label")?;
    let dims: AdapterDims = meta_field(&c.meta, "dims")?;
    if let Some(cfg) = expect {
        dims.check(cfg)?;
    }
    LoraAdapterSet::from_named(dims, rank, alpha, task_label, cast_all(c.tensors))
}

pub fn save_adapters<T: Scalar>(adapters: &LoraAdapterSet<T>, path: &Path) -> Result<()> {
    util::write_bytes(path, adapters_to_bytes(adapters)?)
}

pub fn load_adapters<T: Scalar>(
    path: &Path,
    expect: Option<&ModelConfig>,
) -> Result<LoraAdapterSet<T>> {
    adapters_from_bytes(&util::read_bytes(path)?, expect)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(vec![2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::new(vec![3], vec![7.0f32, 8.0, 9.0]).unwrap();
        encode(
            "model",
            serde_json::json!({"x": 1}),
            [("a".to_string(), &a), ("b".to_string(), &b)],
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample();
        assert_eq!(&bytes[..4], b"SCLP");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let c = decode(&bytes).unwrap();
        assert_eq!(c.tensors[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(c.tensors[1].1.data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn reencoding_is_byte_identical() {
        let bytes = sample();
        let c = decode(&bytes).unwrap();
        let again = encode(
            &c.kind,
            c.meta.clone(),
            c.tensors.iter().map(|(n, t)| (n.clone(), t)),
        )
        .unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = sample();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn every_truncation_is_corruption() {
        let bytes = sample();
        for cut in 4..bytes.len() {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Corruption(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Corruption(_))));
    }
}
