//! Parameter checkpoints: `u32` LE header length, a JSON header, then every
//! tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FORMAT: &str = "ctxagg-params";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// `encoder` or the aggregator method tag.
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorInfo>,
    /// Kind-specific metadata (feature spec, τ, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointHeader {
    pub fn new(kind: &str, seed: u64, config_hash: &str, meta: serde_json::Value) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            seed,
            config_hash: config_hash.into(),
            tensors: Vec::new(),
            meta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_tensors(mut header: CheckpointHeader, tensors: &[Tensor<'_>]) -> Self {
        header.tensors = tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.into(),
                shape: t.shape,
            })
            .collect();
        let data = tensors
            .iter()
            .map(|t| t.data.iter().map(|v| *v as f32).collect())
            .collect();
        Self { header, data }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let n: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(4 + json.len() + 4 * n);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.data {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Format("checkpoint truncated".into());
        let len = u32::from_le_bytes(bytes.get(..4).ok_or_else(short)?.try_into().unwrap()) as usize;
        let json = bytes.get(4..4 + len).ok_or_else(short)?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.format != FORMAT {
            return Err(Error::Format(format!("expected {FORMAT}, found {}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (supported: {VERSION})",
                header.version
            )));
        }
        let mut pos = 4 + len;
        let mut data = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let n = info.shape[0] * info.shape[1];
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(short)?;
            data.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into `dst`, checking names and sizes.
    pub fn restore_into(&self, dst: Vec<(&'static str, &mut [f64])>) -> Result<()> {
        if dst.len() != self.data.len() {
            return Err(Error::shape(
                format!("{} tensors", dst.len()),
                format!("{} tensors", self.data.len()),
            ));
        }
        for ((name, slot), (info, values)) in dst.into_iter().zip(self.header.tensors.iter().zip(&self.data)) {
            if info.name != name || slot.len() != values.len() {
                return Err(Error::shape(
                    format!("{name}[{}]", slot.len()),
                    format!("{}[{}]", info.name, values.len()),
                ));
            }
            slot.iter_mut().zip(values).for_each(|(d, v)| *d = *v as f64);
        }
        Ok(())
    }
}
