//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic     "HDRCMCKPT"
//! version   u32 (= 1)
//! meta_len  u32, then meta_len bytes of UTF-8 `key = value` lines
//! count     u32
//! count × { name_len u32, name bytes, rank u32, rank × dim u32,
//!           Π dims × f32 little-endian }
//! ```
//!
//! Tensor names are prefixed by group (`theta/`, `ema/`, ...). Values are
//! stored as `f32`, so saving a loaded checkpoint reproduces it byte for
//! byte.

use std::path::Path;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::{Param, ParamSet};

pub const MAGIC: &[u8; 9] = b"HDRCMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// `key = value` lines.
    pub meta: String,
    pub tensors: Vec<Param<f32>>,
}

fn bad(reason: impl Into<String>) -> NnError {
    NnError::Checkpoint(reason.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad("length exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.lines().find_map(|line| {
            let (k, v) = line.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn push_meta(&mut self, key: &str, value: impl std::fmt::Display) {
        self.meta.push_str(&format!("{key} = {value}\n"));
    }

    /// Stores `params` under `group/`.
    pub fn push_params<T: Real>(&mut self, group: &str, params: &ParamSet<T>) {
        for p in &params.params {
            self.tensors.push(Param {
                name: format!("{group}/{}", p.name),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.f64() as f32).collect(),
            });
        }
    }

    /// Reads group `group` laid out like `layout`.
    pub fn params<T: Real>(&self, group: &str, layout: &ParamSet<T>) -> Result<ParamSet<T>> {
        let mut out = ParamSet::default();
        for p in &layout.params {
            let name = format!("{group}/{}", p.name);
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape != p.shape {
                return Err(bad(format!("{name}: shape {:?}, expected {:?}", t.shape, p.shape)));
            }
            out.push(p.name.clone(), p.shape.clone(), t.data.iter().map(|&v| T::of(f64::from(v))).collect());
        }
        Ok(out)
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.iter().any(|t| t.name.starts_with(&prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.meta.len())?;
        out.extend_from_slice(self.meta.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(bad(format!("{}: data does not match shape", t.name)));
            }
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let meta = std::str::from_utf8(r.take(n)?)
            .map_err(|_| bad("metadata is not UTF-8"))?
            .to_string();
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.len()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Param { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
