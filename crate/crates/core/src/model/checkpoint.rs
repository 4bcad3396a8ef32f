//! Binary checkpoint container: a JSON metadata block followed by named tensors.
//!
//! Layout (little-endian):
//! `b"MVPC"`, `u32` version, `u32` JSON length, JSON bytes, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u8` dtype (0 = f64, 1 = f32), `u32` rank,
//! `rank` x `u32` dims, payload; finally a `u32` CRC-32 of every preceding byte.

use std::fs;
use std::path::Path;

use crate::autodiff::Array;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Storage precision of a tensor. Values are always f64 in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Dtype, Array)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, value: Array) {
        self.tensors.push((name.into(), dtype, value));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| &t.2)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Array)> {
        self.tensors
            .iter()
            .filter_map(move |(n, _, a)| n.strip_prefix(prefix).map(|s| (s, a)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.meta)?;
        w.len_u32(json.len())?;
        w.bytes(&json);
        w.len_u32(self.tensors.len())?;
        for (name, dtype, a) in &self.tensors {
            w.len_u32(name.len())?;
            w.bytes(name.as_bytes());
            w.u8(dtype.code());
            w.len_u32(a.rank())?;
            for &d in a.shape() {
                w.len_u32(d)?;
            }
            match dtype {
                Dtype::F64 => a.data().iter().for_each(|&v| w.f64(v)),
                Dtype::F32 => a.data().iter().for_each(|&v| w.f32(v as f32)),
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an MVPC checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated("checkpoint: missing checksum".into()));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("four bytes"));
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(Error::Checksum {
                what: "checkpoint".into(),
                stored,
                computed,
            });
        }
        let mut r = ByteReader::new(&bytes[..body], "checkpoint");
        r.take(8)?;
        let json_len = r.count(1)?;
        let meta = serde_json::from_slice(r.take(json_len)?)?;
        let count = r.count(9)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.count(1)?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = match r.u8()? {
                0 => Dtype::F64,
                1 => Dtype::F32,
                other => return Err(Error::Format(format!("tensor `{name}`: unknown dtype {other}"))),
            };
            let rank = r.count(4)?;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(dtype.width()).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Truncated(format!("checkpoint: tensor `{name}` {shape:?} exceeds file")))?;
            let data = (0..n)
                .map(|_| match dtype {
                    Dtype::F64 => r.f64(),
                    Dtype::F32 => r.f32().map(f64::from),
                })
                .collect::<Result<Vec<_>>>()?;
            let a = Array::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, dtype, a));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "checkpoint: {} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&crate::binio::read_file(path.as_ref())?)
    }
}
