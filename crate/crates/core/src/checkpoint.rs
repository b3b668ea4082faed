//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `PCKP`, version `u32`, config digest
//! (32 bytes), element width `u8` (4 or 8), tensor count `u32`; per tensor:
//! name length `u32`, name bytes, group code `u8`, rank `u32`, extents as
//! `u32`, payload. A trailing block holds `u32` pair count and
//! length-prefixed `key`/`value` strings with run provenance.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::{Group, ParamStore};
use crate::synthdata::Reader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub digest: [u8; 32],
    pub params: ParamStore<T>,
    /// Provenance, in insertion order.
    pub meta: Vec<(String, String)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    let at = r.offset();
    String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| Error::Format {
        offset: at,
        message: "string is not UTF-8".into(),
    })
}

/// Header fields readable without knowing the element type.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSummary {
    pub version: u32,
    pub digest: [u8; 32],
    pub width: u8,
    /// `(name, group, shape)` per tensor.
    pub tensors: Vec<(String, Group, Vec<usize>)>,
    pub meta: Vec<(String, String)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(digest: [u8; 32], params: ParamStore<T>) -> Self {
        Checkpoint {
            digest,
            params,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Sets `key`, replacing an existing entry in place.
    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    /// Stages completed so far, in order.
    pub fn stages(&self) -> Vec<u8> {
        self.meta("stages")
            .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
            .unwrap_or_default()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            put_str(&mut out, self.params.name(id));
            out.push(self.params.group(id).code());
            let v = self.params.value(id);
            out.extend_from_slice(&(v.rank() as u32).to_le_bytes());
            for &d in v.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in v.data() {
                x.write_le(&mut out);
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut params = ParamStore::new();
        let summary = walk(buf, |name, group, shape, payload| {
            let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
            params.insert(name, group, Tensor::new(shape, data)?)?;
            Ok(())
        }, Some(T::BYTES as u8))?;
        Ok(Checkpoint {
            digest: summary.digest,
            params,
            meta: summary.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Loads and checks the digest against `expected` unless `force` is set.
    pub fn load_checked(path: impl AsRef<Path>, expected: [u8; 32], force: bool) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.digest != expected && !force {
            return Err(Error::DigestMismatch {
                found: crate::config::hex(&ck.digest),
                expected: crate::config::hex(&expected),
            });
        }
        Ok(ck)
    }
}

/// Parses the header and tensor table without materialising values.
pub fn summarize(buf: &[u8]) -> Result<CheckpointSummary> {
    walk(buf, |_, _, _, _| Ok(()), None)
}

fn walk(
    buf: &[u8],
    mut visit: impl FnMut(String, Group, Vec<usize>, &[u8]) -> Result<()>,
    want_width: Option<u8>,
) -> Result<CheckpointSummary> {
    let mut r = Reader::new(buf);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected PCKP".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    let width = r.u8()?;
    if width != 4 && width != 8 {
        return Err(r.fail(format!("element width {width}")));
    }
    if let Some(w) = want_width {
        if w != width {
            return Err(r.fail(format!("checkpoint holds {width}-byte elements, expected {w}")));
        }
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let name = get_str(&mut r)?;
        let code = r.u8()?;
        let group = Group::from_code(code).ok_or_else(|| r.fail(format!("group code {code}")))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.fail(format!("rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(width as usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail("tensor size overflows"))?;
        let at = r.offset();
        let payload = r.bytes(n)?;
        visit(name.clone(), group, shape.clone(), payload).map_err(|e| match e {
            Error::Format { .. } => e,
            other => Error::Format {
                offset: at,
                message: other.to_string(),
            },
        })?;
        tensors.push((name, group, shape));
    }
    let n_meta = r.u32()? as usize;
    let mut meta = Vec::new();
    for _ in 0..n_meta {
        let k = get_str(&mut r)?;
        let v = get_str(&mut r)?;
        meta.push((k, v));
    }
    if !r.is_at_end() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(CheckpointSummary {
        version,
        digest,
        width,
        tensors,
        meta,
    })
}
