//! Binary model checkpoints.
//!
//! ```text
//! magic "WSDC" | version u16 = 1 | reserved u16 = 0 | header_len u32
//! header: JSON {config, seed}
//! count u32
//! count × { name_len u16 | name utf-8 | rank u32 | rank × u64 dims | f64 payload }
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in name
//! order, so equal models give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wsdmil_autograd::Tensor;

use crate::error::{Error, Result};
use crate::model::{WsdConfig, WsdModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSDC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: WsdConfig,
    pub seed: u64,
}

pub fn encode_checkpoint(model: &WsdModel, seed: u64) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        seed,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(WsdModel, CheckpointHeader)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.u16()?;
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let model = WsdModel::from_parts(header.config.clone(), params)?;
    Ok((model, header))
}

pub fn save_checkpoint(model: &WsdModel, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, seed)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(WsdModel, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_determinism() {
        let m = WsdModel::new(WsdConfig::default().variant("fixwin8").unwrap(), 3).unwrap();
        let bytes = encode_checkpoint(&m, 3).unwrap();
        assert_eq!(bytes, encode_checkpoint(&m, 3).unwrap());
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.seed, 3);
    }

    #[test]
    fn rejects_damage() {
        let m = WsdModel::new(WsdConfig::default().variant("mean-pool").unwrap(), 3).unwrap();
        let bytes = encode_checkpoint(&m, 0).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }
}
