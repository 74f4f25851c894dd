//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | field        | type                      |
//! |--------------|---------------------------|
//! | magic        | `b"IBRN"`                 |
//! | version      | u32                       |
//! | step         | u64                       |
//! | fingerprint  | u64                       |
//! | record count | u32                       |
//! | records      | repeated                  |
//!
//! Each record is `name_len: u32`, `name: utf-8`, `dtype: u8`, `rank: u32`,
//! `dims: u64 × rank`, then the payload. dtype 0 is f32 (4 bytes per element),
//! dtype 1 is raw bytes (used for the embedded model config).

use std::fs;
use std::path::Path;

use ibr_tensor::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"IBRN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("missing record {0}")]
    MissingRecord(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub fingerprint: u64,
    pub records: Vec<(String, Record)>,
}

impl Checkpoint {
    pub fn new(step: u64, fingerprint: u64) -> Self {
        Checkpoint { step, fingerprint, records: Vec::new() }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.records.push((name.into(), Record::F32(t)));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.records.push((name.into(), Record::Bytes(b)));
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        match self.get(name) {
            Some(Record::F32(t)) => Ok(t),
            _ => Err(CheckpointError::MissingRecord(name.to_string())),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match self.get(name) {
            Some(Record::Bytes(b)) => Ok(b),
            _ => Err(CheckpointError::MissingRecord(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match rec {
                Record::F32(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let step = r.u64()?;
        let fingerprint = r.u64()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Format("record name is not utf-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(CheckpointError::Format(format!("record {name}: rank {rank} too large")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("record {name}: size overflow")))?;
            let rec = match dtype {
                0 => {
                    let size = numel
                        .checked_mul(4)
                        .ok_or_else(|| CheckpointError::Format(format!("record {name}: size overflow")))?;
                    let raw = r.take(size)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    Record::F32(Tensor::new(dims, data).map_err(|e| CheckpointError::Format(e.to_string()))?)
                }
                1 => Record::Bytes(r.take(numel)?.to_vec()),
                d => return Err(CheckpointError::Format(format!("record {name}: unknown dtype {d}"))),
            };
            records.push((name, rec));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { step, fingerprint, records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
