//! Model snapshots in the `CTCK` binary layout.
//!
//! Layout, little-endian: `b"CTCK"`, u32 version (1), u32 config length and
//! that many bytes of TOML model config, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, u8 rank, u32 dims[rank] and f32 values in
//! row-major order. Parameters come first in registration order, followed by
//! the batch-norm running statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_network, Model, ModelConfig};
use crate::tensor::Element;

use super::bytes::Reader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(m: &Model<T>) -> Self {
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect();
        let mut tensors: Vec<StoredTensor> = m
            .store
            .params()
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: f32s(p.tensor.data()),
            })
            .collect();
        tensors.extend(m.store.buffers().iter().map(|b| StoredTensor {
            name: b.name.clone(),
            shape: b.shape.clone(),
            data: f32s(&b.data),
        }));
        Checkpoint {
            config: m.config.clone(),
            tensors,
        }
    }

    /// Rebuilds the network and overwrites every parameter and buffer. The
    /// tensor list must match the config's registration order exactly.
    pub fn to_model<T: Element>(&self) -> Result<Model<T>> {
        let mut m = build_network::<T>(&self.config, 0)?;
        let expected = m.store.len() + m.store.buffers().len();
        if self.tensors.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config expects {expected}",
                self.tensors.len()
            )));
        }
        let (params, buffers) = self.tensors.split_at(m.store.len());
        let cast = |v: &[f32]| v.iter().map(|&x| T::of(f64::from(x))).collect::<Vec<T>>();
        let ids: Vec<_> = m.store.ids().collect();
        for (id, t) in ids.into_iter().zip(params) {
            let p = m.store.param(id);
            if p.name != t.name || p.tensor.shape() != t.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match parameter {} {:?}",
                    t.name,
                    t.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            m.store.set(id, cast(&t.data))?;
        }
        let buffer_ids: Vec<_> = m.store.buffer_ids().collect();
        for (id, t) in buffer_ids.into_iter().zip(buffers) {
            let b = &m.store.buffers()[id.index()];
            if b.name != t.name || b.shape != t.shape {
                return Err(Error::Format(format!(
                    "tensor {} does not match buffer {}",
                    t.name, b.name
                )));
            }
            m.store.set_buffer(id, cast(&t.data));
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.config.to_toml();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(config.len(), "config")?.to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Format(format!("name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Format(format!("rank too large: {}", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?;
        let config = ModelConfig::from_toml(text)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        r.finish()?;
        Ok(Checkpoint { config, tensors })
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn save_checkpoint<T: Element>(m: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(m).to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)?.to_model()
}
