//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "MMCK"  u32 version  u32 param_count
//! param_count × { u32 name_len, name bytes, u32 ndim, ndim × u32 dims, f32 data }
//! u8 has_optimizer
//! if has_optimizer: u64 step, then for each param in order: f32 m data, f32 v data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{AdamState, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, optimizer: Option<&AdamState>) -> Self {
        Checkpoint {
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            put_f32s(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for (m, v) in st.m.iter().zip(&st.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "parameter name is not utf-8"))?;
            let ndim = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::format(path, format!("{name}: unsupported rank {ndim}"))),
            };
            let data = r.f32s(rows * cols)?;
            params.push((name, Tensor::new(rows, cols, data)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (_, t) in &params {
                    m.push(Tensor::new(t.rows(), t.cols(), r.f32s(t.len())?)?);
                    v.push(Tensor::new(t.rows(), t.cols(), r.f32s(t.len())?)?);
                }
                Some(AdamState { step, m, v })
            }
            b => return Err(Error::format(path, format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies stored values into `store` by name. Every checkpoint entry must
    /// exist in the store with the same shape; store parameters absent from
    /// the checkpoint are an error unless `may_be_missing` accepts the name.
    pub fn apply(&self, store: &mut ParamStore, may_be_missing: impl Fn(&str) -> bool) -> Result<()> {
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for (_, p) in store.iter() {
            if !self.params.iter().any(|(n, _)| n == &p.name) && !may_be_missing(&p.name) {
                return Err(Error::Checkpoint(format!("missing parameter {}", p.name)));
            }
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}
