//! Versioned binary container shared by network checkpoints and the dataset
//! cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PNCK" | u32 version | u64 header_len | header (JSON)
//! u64 array_count | { u64 len | len × f64 } ...
//! ```
//!
//! Arrays are raw IEEE-754 bit patterns, so `f64` values round-trip exactly.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNCK";
pub const VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::state(format!("header encoding: {e}")))?;
    let payload: usize = arrays.iter().map(|a| 8 + 8 * a.len()).sum();
    let mut out = Vec::with_capacity(24 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<Vec<f64>>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let hlen = c.u64("header length")? as usize;
    let hpos = c.pos;
    let header = serde_json::from_slice(c.take(hlen, "header")?).map_err(|e| Error::Format {
        offset: hpos as u64,
        message: format!("header: {e}"),
    })?;
    let count = c.u64("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let len = c.u64("array length")? as usize;
        let raw = c.take(len.checked_mul(8).unwrap_or(usize::MAX), "array data")?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: "trailing bytes".into(),
        });
    }
    Ok((header, arrays))
}

pub fn write<H: Serialize>(path: &Path, header: &H, arrays: &[&[f64]]) -> Result<()> {
    fs::write(path, encode(header, arrays)?).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
