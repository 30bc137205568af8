//! `VTC1` checkpoints.
//!
//! ```text
//! "VTC1"
//! u64 LE  config length,   config JSON
//! u64 LE  manifest length, manifest JSON: [{name, shape, dtype, offset, kind}]
//! zero padding to a 64-byte boundary
//! payload: raw little-endian values; every offset (relative to the payload
//!          start) is 64-byte aligned
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::params::TensorKind;
use crate::rng::Rng;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::vit::{build_model, Model};

pub const MAGIC: &[u8; 4] = b"VTC1";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub kind: EntryKind,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `model` into checkpoint bytes.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut config = model.config.clone();
    config.dtype = T::DTYPE;
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut offset = 0usize;
    for e in model.params.entries() {
        manifest.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            dtype: T::DTYPE,
            offset: offset as u64,
            kind: match e.kind {
                TensorKind::Param => EntryKind::Param,
                TensorKind::Buffer => EntryKind::Buffer,
            },
        });
        offset = align(offset + e.tensor.numel() * T::DTYPE.size_of());
    }
    let config_json = serde_json::to_vec(&config).expect("config serializes");
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(offset + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.resize(align(out.len()), 0);
    let payload = out.len();
    for (e, m) in model.params.entries().iter().zip(&manifest) {
        out.resize(payload + m.offset as usize, 0);
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, to_bytes(model))?)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("{what} at byte offset {} runs past the end of the file", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    }
}

/// Parses checkpoint bytes written by [`to_bytes`], validating the magic,
/// the manifest layout, and agreement with the model built from the stored
/// configuration.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic: not a VTC1 checkpoint".into()));
    }
    let n = r.u64("config length")?;
    let config: ViTConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::Format(format!("invalid config JSON: {e}")))?;
    let n = r.u64("manifest length")?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(r.take(n, "manifest")?)
        .map_err(|e| Error::Format(format!("invalid manifest JSON: {e}")))?;
    let payload = align(r.pos);
    if payload > bytes.len() {
        return Err(Error::Format("missing payload".into()));
    }
    let body = &bytes[payload..];

    let mut model: Model<T> = build_model(&config, &mut Rng::new(0))
        .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    if manifest.len() != model.params.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors but the config defines {}",
            manifest.len(),
            model.params.len()
        )));
    }
    let mut end_of_previous = 0usize;
    let ids: Vec<_> = model.params.ids().collect();
    for (m, id) in manifest.iter().zip(ids) {
        let expect_name = model.params.name(id).to_string();
        if m.name != expect_name {
            return Err(Error::Format(format!(
                "tensor {} found where {expect_name} was expected",
                m.name
            )));
        }
        if m.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {} is {} but {} was requested",
                m.name,
                m.dtype,
                T::DTYPE
            )));
        }
        let expect_shape = model.params.get(id).shape().to_vec();
        if m.shape != expect_shape {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?} but the config implies {:?}",
                m.name, m.shape, expect_shape
            )));
        }
        let kind = match model.params.kind(id) {
            TensorKind::Param => EntryKind::Param,
            TensorKind::Buffer => EntryKind::Buffer,
        };
        if m.kind != kind {
            return Err(Error::Format(format!("tensor {} has kind {:?}, expected {kind:?}", m.name, m.kind)));
        }
        let start = m.offset as usize;
        if start % ALIGN != 0 {
            return Err(Error::Format(format!("tensor {} offset {start} is not 64-byte aligned", m.name)));
        }
        if start < end_of_previous {
            return Err(Error::Format(format!("tensor {} offset {start} overlaps the previous tensor", m.name)));
        }
        let numel: usize = m.shape.iter().product();
        let size = T::DTYPE.size_of();
        let end = start + numel * size;
        if end > body.len() {
            return Err(Error::Format(format!(
                "tensor {} ends at payload offset {end}, past the payload of {} bytes",
                m.name,
                body.len()
            )));
        }
        let data: Vec<T> = body[start..end].chunks_exact(size).map(T::read_le).collect();
        model.params.set(id, Tensor::new(&m.shape, data)?)?;
        end_of_previous = end;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    from_bytes(&std::fs::read(path)?)
}
