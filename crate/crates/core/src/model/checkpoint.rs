//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "DSFP" | version: u32 | meta_len: u32 | meta: UTF-8 JSON
//! then per tensor until EOF:
//!   name_len: u32 | name: UTF-8 | dtype: u8 (0 = f32) | rank: u8 | dims: u64 × rank | values: f32 × Π dims
//! ```
//!
//! The metadata JSON carries the layer specs, so a loader knows exactly which
//! tensors must follow and with what shapes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, ModelMeta};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSFP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
/// Upper bound on any single layer extent accepted from a file.
const MAX_EXTENT: usize = 1 << 24;
const MAX_INPUT_EXTENT: usize = 1 << 16;

#[derive(Serialize, Deserialize)]
struct Metadata {
    arch: String,
    input_shape: [usize; 3],
    class_count: usize,
    layers: Vec<LayerSpec>,
    norm: NormStats,
    #[serde(default)]
    history: serde_json::Value,
}

pub fn encode_checkpoint(model: &ModelGraph<f32>) -> Result<Vec<u8>> {
    let meta = Metadata {
        arch: model.meta.arch.clone(),
        input_shape: model.meta.input_shape,
        class_count: model.meta.class_count,
        layers: model.specs(),
        norm: model.norm.clone(),
        history: model.history.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelGraph<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Rejects metadata whose parameter volume could not possibly be backed by
/// the remaining bytes, before anything is allocated.
fn check_budget(meta: &Metadata, payload: usize) -> Result<()> {
    let too_big = |what: &str| Error::Checkpoint(format!("{what} exceeds format limits"));
    if meta
        .input_shape
        .iter()
        .any(|&d| d == 0 || d > MAX_INPUT_EXTENT)
        || meta.class_count > MAX_EXTENT
    {
        return Err(too_big("input shape or class count"));
    }
    if meta.norm.mean.len() != meta.input_shape[0] || meta.norm.std.len() != meta.input_shape[0] {
        return Err(Error::Checkpoint(
            "normalization stats do not match input channels".into(),
        ));
    }
    if meta.norm.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        || meta.norm.mean.iter().any(|m| !m.is_finite())
    {
        return Err(Error::Checkpoint(
            "normalization stats must be finite with positive std".into(),
        ));
    }
    let mut values: usize = 0;
    for spec in &meta.layers {
        let count = match *spec {
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                pad,
            } => {
                if [in_channels, filters, kernel, stride, pad]
                    .iter()
                    .any(|&v| v > MAX_EXTENT)
                {
                    return Err(too_big("conv attribute"));
                }
                kernel
                    .checked_mul(kernel)
                    .and_then(|v| v.checked_mul(in_channels))
                    .and_then(|v| v.checked_add(1))
                    .and_then(|v| v.checked_mul(filters))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features > MAX_EXTENT || out_features > MAX_EXTENT {
                    return Err(too_big("linear attribute"));
                }
                in_features
                    .checked_add(1)
                    .and_then(|v| v.checked_mul(out_features))
            }
            LayerSpec::MaxPool { size, stride } => {
                if size > MAX_EXTENT || stride > MAX_EXTENT {
                    return Err(too_big("pool attribute"));
                }
                Some(0)
            }
            _ => Some(0),
        };
        values = count
            .and_then(|c| values.checked_add(c))
            .ok_or_else(|| too_big("parameter count"))?;
    }
    if values.saturating_mul(4) > payload {
        return Err(Error::Checkpoint(format!(
            "metadata implies {values} parameters but only {payload} bytes follow"
        )));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelGraph<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DSFP checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let json = r.take(meta_len, "metadata")?;
    let meta: Metadata =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    check_budget(&meta, r.remaining())?;

    let model_meta = ModelMeta {
        arch: meta.arch,
        input_shape: meta.input_shape,
        class_count: meta.class_count,
    };
    let mut model = ModelGraph::<f32>::from_specs(model_meta, meta.layers)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    model.norm = meta.norm;
    model.history = meta.history;

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    while r.remaining() > 0 {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype tag {dtype}"
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dim")?)
                .map_err(|_| Error::Checkpoint("dim overflows".into()))?;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name}: element count overflows"))
            })?;
            dims.push(d);
        }
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            "tensor values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        tensors.insert(name, Tensor::new(dims, data)?);
    }

    for (i, layer) in model.layers.iter_mut().enumerate() {
        for (bias, slot) in [(false, &mut layer.weight), (true, &mut layer.bias)] {
            let Some(expected) = slot.as_mut() else {
                continue;
            };
            let name = ModelGraph::<f32>::param_name(i, bias);
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            *expected = t;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}
