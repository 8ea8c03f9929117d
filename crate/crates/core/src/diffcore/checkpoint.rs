//! Little-endian binary checkpoint.
//!
//! Layout: magic `R2IO`, `u32` version (1), `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and the
//! raw `f64` values. Momentum buffers are stored as `<name>.m`, metadata as
//! tensors under `meta.`.

use std::collections::BTreeMap;
use std::path::Path;

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"R2IO";
pub const VERSION: u32 = 1;
pub const META_PREFIX: &str = "meta.";

/// Everything a checkpoint file holds besides raw bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, Vec<f64>>,
}

pub fn encode(entries: &[(String, Vec<usize>, &[f64])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, values) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("tensor name: {e}"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(dims, values).map_err(|e| format!("tensor {name:?}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((name.to_string(), t.shape().to_vec(), t.values()));
            let m = self.params.momentum(name).unwrap();
            entries.push((format!("{name}.m"), t.shape().to_vec(), m));
        }
        for (k, v) in &self.meta {
            entries.push((format!("{META_PREFIX}{k}"), vec![v.len()], v.as_slice()));
        }
        encode(&entries)
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let tensors = decode(buf)?;
        let mut ck = Checkpoint::default();
        let mut momenta = Vec::new();
        for (name, t) in tensors {
            if let Some(key) = name.strip_prefix(META_PREFIX) {
                ck.meta.insert(key.to_string(), t.into_values());
            } else if let Some(base) = name.strip_suffix(".m") {
                momenta.push((base.to_string(), t));
            } else {
                ck.params.insert(&name, t).map_err(|e| e.to_string())?;
            }
        }
        for (base, t) in momenta {
            ck.params
                .set_momentum(&base, t.into_values())
                .map_err(|e| format!("momentum {base:?}: {e}"))?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf).map_err(|m| Error::format(path, m))
    }
}
