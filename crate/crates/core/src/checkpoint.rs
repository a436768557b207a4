//! Binary tensor-table files.
//!
//! Layout (all header integers little-endian):
//!
//! ```text
//! "MCAE" | u32 version | u32 config length | config (UTF-8) | u32 tensor count
//! per tensor: u16 name length | name | u8 dtype (0 = f32) | u8 ndim | ndim × u64 dims | payload (f32 LE)
//! ```
//!
//! Tensors are written in name order, so equal contents give equal bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"MCAE";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Name suffixes of tensors that are restored as buffers rather than parameters.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>, tensors: ParamStore<f32>) -> Self {
        Checkpoint { config: config.into(), tensors }
    }

    /// Value of `key` in the `key=value` config block.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.lines().find_map(|line| {
            let (k, v) = line.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&u32::try_from(cfg.len()).map_err(|_| Error::Checkpoint("config too long".into()))?.to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("tensor name {name:?} too long")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("{name}: too many dims")))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing MCAE magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let clen = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?
            .to_string();
        let count = r.u32()?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dimension {d} too large")))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: payload truncated")))?;
            let data: Vec<f32> =
                r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s)) {
                tensors.insert_buffer(name, t);
            } else {
                tensors.insert_param(name, t);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}
