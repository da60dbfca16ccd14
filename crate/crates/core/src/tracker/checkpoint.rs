//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MTTK`, `u32` version, `u32` header length,
//! JSON header, then per tensor: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::Network;
use super::TrackerConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTTK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrackerConfig,
    tensors: usize,
}

/// A tensor record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn checkpoint_bytes(net: &Network) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: net.cfg().clone(),
        tensors: net.store.len(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * net.store.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in net.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(net)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into its config and raw tensor records.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(TrackerConfig, Vec<CheckpointTensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Version(format!("incompatible checkpoint header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors);
    for _ in 0..header.tensors {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(CheckpointTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok((header.config, tensors))
}

pub fn read_checkpoint(path: &Path) -> Result<(TrackerConfig, Vec<CheckpointTensor>)> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Rebuilds a network from checkpoint bytes. Every parameter of the
/// configured model must be present with a matching shape.
pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let (cfg, tensors) = parse_checkpoint(bytes)?;
    let mut net = Network::new(&cfg)?;
    if tensors.len() != net.store.len() {
        return Err(Error::Version(format!(
            "incompatible checkpoint: {} tensors, model has {}",
            tensors.len(),
            net.store.len()
        )));
    }
    for t in tensors {
        let id = net
            .store
            .id(&t.name)
            .ok_or_else(|| Error::Version(format!("incompatible checkpoint: unknown tensor {}", t.name)))?;
        if net.store.tensor(id).shape() != t.shape.as_slice() {
            return Err(Error::Version(format!(
                "incompatible checkpoint: {} has shape {:?}, model expects {:?}",
                t.name,
                t.shape,
                net.store.tensor(id).shape()
            )));
        }
        let data = t.data.iter().map(|&v| v as f64).collect();
        *net.store.tensor_mut(id) = Tensor::new(&t.shape, data)?;
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    network_from_bytes(&std::fs::read(path)?)
}
