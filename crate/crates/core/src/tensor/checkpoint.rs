//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DBCKPT\0"  version:u16
//! header_len:u32  header: UTF-8 `key=value` lines
//! count:u32
//! count × { name_len:u16 name:utf8  rank:u8  dims:u32[rank]  payload:f32[prod(dims)] }
//! ```
//!
//! Parameter values come first, followed by their momentum buffers under the
//! same name with a `#m` suffix.

use std::path::Path;

use super::{Element, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"DBCKPT\0";
pub const VERSION: u16 = 1;
pub const MOMENTUM_SUFFIX: &str = "#m";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` metadata (model architecture, training progress).
    pub header: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store<T: Element>(store: &ParamStore<T>, header: Vec<(String, String)>) -> Self {
        let to_f32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        let mut entries: Vec<Entry> = store
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                dims: p.value.shape().to_vec(),
                data: to_f32(p.value.data()),
            })
            .collect();
        entries.extend(store.iter().map(|p| Entry {
            name: format!("{}{MOMENTUM_SUFFIX}", p.name),
            dims: p.value.shape().to_vec(),
            data: to_f32(&p.momentum),
        }));
        Checkpoint { header, entries }
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copy values (and momentum buffers, when present) into a store whose
    /// parameter names and shapes must match exactly.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let entry = self
                .entries
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if entry.dims != p.value.shape() {
                return Err(Error::contract(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    entry.dims,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(entry.dims.clone(), entry.data.iter().map(|&v| T::of(v as f64)).collect())?;
            let mname = format!("{}{MOMENTUM_SUFFIX}", p.name);
            p.momentum = match self.entries.iter().find(|e| e.name == mname) {
                Some(m) if m.dims == entry.dims => m.data.iter().map(|&v| T::of(v as f64)).collect(),
                Some(_) => return Err(Error::contract(format!("momentum shape mismatch for `{}`", p.name))),
                None => vec![T::zero(); p.value.numel()],
            };
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::contract(format!("header entry `{k}` is not a single key=value line")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("parameter name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let rank = u8::try_from(e.dims.len()).map_err(|_| Error::contract("rank exceeds 255"))?;
            out.push(rank);
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| Error::contract("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            if e.data.len() != e.dims.iter().product::<usize>() {
                return Err(Error::shape(format!("entry `{}` payload does not match dims", e.name)));
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let at = r.pos;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::format(at, "header is not UTF-8"))?;
        let mut header = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("header line without '=': {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(r.pos, "payload size overflow"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos as usize != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Cursor over a byte slice that reports truncation with its offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: u64,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        let end = start
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated: need {n} more bytes")))?;
        self.pos = end as u64;
        Ok(&self.bytes[start..end])
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
