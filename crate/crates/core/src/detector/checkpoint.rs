//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ACPCKPT\0"
//! version    u32
//! header_len u64, then header_len bytes of JSON {"config": .., "metadata": ..}
//! n_tensors  u32
//! per tensor: name_len u32, name (UTF-8), ndim u32, dims u64 x ndim,
//!             values f32 x prod(dims)
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::layers::{ParamSet, Tensor};
use super::{Detector, DetectorConfig, Losses};
use crate::corpus::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub iterations_run: usize,
    pub final_losses: Option<Losses<f64>>,
    pub best_step: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub split_seed: Option<u64>,
    /// Seconds since the Unix epoch; the only field that differs between
    /// otherwise identical runs.
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DetectorConfig,
    metadata: CheckpointMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub metadata: CheckpointMetadata,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn from_detector<T: Scalar>(detector: &Detector<T>, metadata: CheckpointMetadata) -> Self {
        Self { config: detector.config().clone(), metadata, params: detector.params().cast() }
    }

    pub fn detector<T: Scalar>(&self) -> Result<Detector<T>> {
        Detector::from_params(self.config.clone(), self.params.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { config: self.config.clone(), metadata: self.metadata.clone() })
            .expect("header serializes");
        let mut out = Vec::with_capacity(32 + header.len() + 4 * self.params.len_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(header.len() as u64).expect("vec write");
        out.extend_from_slice(&header);
        out.write_u32::<LittleEndian>(self.params.tensors.len() as u32).expect("vec write");
        for t in &self.params.tensors {
            out.write_u32::<LittleEndian>(t.name.len() as u32).expect("vec write");
            out.extend_from_slice(t.name.as_bytes());
            out.write_u32::<LittleEndian>(t.shape.len() as u32).expect("vec write");
            for &d in &t.shape {
                out.write_u64::<LittleEndian>(d as u64).expect("vec write");
            }
            for &v in &t.data {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("truncated or corrupt container ({what})"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = r.read_u64::<LittleEndian>().map_err(|_| bad("header length"))? as usize;
        let remaining = bytes.len() - r.position() as usize;
        if header_len > remaining {
            return Err(bad("header length"));
        }
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(|_| bad("header"))?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::json("checkpoint header", e))?;

        let n = r.read_u32::<LittleEndian>().map_err(|_| bad("tensor count"))?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name_len = r.read_u32::<LittleEndian>().map_err(|_| bad("name length"))? as usize;
            if name_len > 4096 {
                return Err(bad("name length"));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name encoding"))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(|_| bad("rank"))? as usize;
            if ndim > 8 {
                return Err(bad("rank"));
            }
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize).map_err(|_| bad("dims")))
                .collect::<Result<Vec<usize>>>()?;
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("dims"))?;
            if len.saturating_mul(4) > bytes.len() - r.position() as usize {
                return Err(bad("tensor data"));
            }
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("tensor data"))?;
            params.push(Tensor { name, shape, data });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let ckpt = Self { config: header.config, metadata: header.metadata, params };
        ckpt.detector::<f32>()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
