//! Binary checkpoint container.
//!
//! ```text
//! "SFCK" | u32 version | u32 len | config TOML (utf-8)
//! u32 n_params | n × { u32 name_len | name | u32 ndim | ndim × u32 | f32 values }
//! ```
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use super::ParamSet;
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_params(config_toml: impl Into<String>, params: &ParamSet<f32>) -> Self {
        Self {
            config_toml: config_toml.into(),
            arrays: params.iter().map(|(n, s, v)| (n.to_string(), s.to_vec(), v.to_vec())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config_toml.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.arrays {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let config_toml = r.string()?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| payload("shape overflow"))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| payload("shape overflow"))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            arrays.push((name, shape, values));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::SizeMismatch { expected: r.pos as u64, found: bytes.len() as u64 });
        }
        Ok(Self { config_toml, arrays })
    }
}

fn payload(msg: &str) -> FormatError {
    FormatError::Payload(msg.into())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::SizeMismatch {
            expected: (self.pos + n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| payload("string is not utf-8"))
    }
}

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|k| Error::format(path, k))
}
