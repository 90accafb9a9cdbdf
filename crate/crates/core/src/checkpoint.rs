//! Training checkpoints.
//!
//! Layout, little-endian: magic `DMTC`, `u32` version, `u32` length plus
//! UTF-8 header text (`key = value` lines: training state followed by the
//! resolved run configuration), `u32` record count, then records of
//! `u32` name length, name, `u32` rank, `u32` extents, `f64` values.
//! Records hold every parameter and buffer by name plus optimiser velocity
//! under `opt.velocity.<name>`.

use std::fs;
use std::path::Path;

use crate::error::{DemtError, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"DMTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(header: String, records: Vec<Record>) -> Self {
        Self {
            version: VERSION,
            header,
            records,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| &r.tensor)
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.lines().find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut out, self.header.len());
        out.extend_from_slice(self.header.as_bytes());
        u32le(&mut out, self.records.len());
        for r in &self.records {
            u32le(&mut out, r.name.len());
            out.extend_from_slice(r.name.as_bytes());
            u32le(&mut out, r.tensor.shape().len());
            for &d in r.tensor.shape() {
                u32le(&mut out, d);
            }
            for v in r.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(DemtError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(DemtError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = rd.u32()? as usize;
        let header = String::from_utf8(rd.take(hlen)?.to_vec())
            .map_err(|_| DemtError::Format("checkpoint header is not UTF-8".into()))?;
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(nlen)?.to_vec())
                .map_err(|_| DemtError::Format("record name is not UTF-8".into()))?;
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let data = rd
                .take(
                    n.checked_mul(8)
                        .ok_or_else(|| DemtError::Format("record too large".into()))?,
                )?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| DemtError::Format(format!("record {name}: {e}")))?;
            records.push(Record { name, tensor });
        }
        if rd.pos != bytes.len() {
            return Err(DemtError::Format(format!(
                "{} trailing bytes after checkpoint records",
                bytes.len() - rd.pos
            )));
        }
        Ok(Self {
            version,
            header,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| DemtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DemtError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DemtError::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            "step = 3\n".into(),
            vec![
                Record {
                    name: "a.weight".into(),
                    tensor: Tensor::new(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(),
                },
                Record {
                    name: "b".into(),
                    tensor: Tensor::scalar(7.0),
                },
            ],
        )
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.header_value("step"), Some("3"));
    }

    #[test]
    fn version_mismatch_names_versions() {
        let mut bytes = sample().encode();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(
            err,
            DemtError::VersionMismatch {
                found: 9,
                expected: 1
            }
        ));
        assert!(err.to_string().contains('9') && err.to_string().contains('1'));
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }
}
