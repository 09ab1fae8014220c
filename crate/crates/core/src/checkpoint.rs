//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STGC"  version:u32  descriptor_len:u64  descriptor (JSON, UTF-8)
//! repeated until EOF:
//!   name_len:u32  name (UTF-8)  rank:u32  extents:u64 × rank  payload:f64 × Π extents
//! ```
//!
//! Parameter payloads are stored as `f64` whatever the model's scalar type.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ZScoreStats;
use crate::error::{input_err, Result, StgcnError};
use crate::graph::LaplacianBundle;
use crate::layers::{ModelConfig, StgcnModel};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"STGC";
pub const FORMAT_VERSION: u32 = 1;

/// Architecture and preprocessing needed to use the stored parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub model: ModelConfig,
    pub zscore: Option<ZScoreStats>,
    /// Forecast step (1-based) the model was trained to emit directly.
    pub target_step: usize,
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: CheckpointDescriptor,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &StgcnModel<T>,
        zscore: Option<ZScoreStats>,
        target_step: usize,
        epoch: Option<usize>,
    ) -> Self {
        let tensors = model
            .parameter_values()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.into_iter().map(T::as_f64).collect(),
            })
            .collect();
        Self {
            descriptor: CheckpointDescriptor {
                model: model.config().clone(),
                zscore,
                target_step,
                epoch,
            },
            tensors,
        }
    }

    /// Rebuilds the model on `bundle` with the stored parameters.
    pub fn restore<T: Scalar>(&self, bundle: &LaplacianBundle<T>) -> Result<StgcnModel<T>> {
        let model = StgcnModel::new(self.descriptor.model.clone(), bundle, 0)?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn load_into<T: Scalar>(&self, model: &StgcnModel<T>) -> Result<()> {
        let values: Vec<_> = self
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.data.iter().map(|&v| T::of(v)).collect()))
            .collect();
        model.load_parameters(&values)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let descriptor = serde_json::to_vec(&self.descriptor)?;
        let mut out = Vec::with_capacity(
            16 + descriptor.len() + self.tensors.iter().map(|t| 16 + t.name.len() + 8 * t.data.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
        out.extend_from_slice(&descriptor);
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(input_err!("tensor {} payload does not match shape {:?}", t.name, t.shape));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(input_err!("not a checkpoint: bad magic bytes"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(input_err!("unsupported checkpoint version {version}"));
        }
        let len = r.u64()? as usize;
        let descriptor: CheckpointDescriptor = serde_json::from_slice(r.take(len)?)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| input_err!("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = r.take(count.checked_mul(8).ok_or_else(|| input_err!("tensor {name} too large"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| StgcnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| StgcnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            input_err!("checkpoint truncated at byte {} (wanted {n} more)", self.pos)
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
