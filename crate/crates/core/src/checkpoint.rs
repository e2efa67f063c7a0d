//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "HAGCNCKP" | u32 version
//! u32 len + UTF-8 run configuration echo
//! u32 N, then N × (u32 len + UTF-8 node id)
//! u32 d, d × f64 mean, d × f64 std
//! u32 tensor count, then per tensor:
//!     u32 len + UTF-8 name | u32 ndim | ndim × u64 dims | f64 data
//! ```
//!
//! Parameters are stored at full precision, so a reloaded model reproduces
//! the saved one bit for bit.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::RunConfig;
use crate::data::Normalizer;
use crate::error::{HagcnError, Result};
use crate::model::{zero_params, ModelParams};
use crate::params::ParamTree;

const MAGIC: &[u8; 8] = b"HAGCNCKP";
const VERSION: u32 = 1;

/// A trained model with everything needed to run it on new windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub node_ids: Vec<String>,
    pub normalizer: Normalizer,
    pub params: ModelParams,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| HagcnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| HagcnError::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.node_ids.len() as u32);
        for id in &self.node_ids {
            put_str(&mut out, id);
        }
        put_u32(&mut out, self.normalizer.num_features() as u32);
        for v in self.normalizer.mean.iter().chain(&self.normalizer.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut tensors = Vec::new();
        self.params.for_each("", &mut |name, t| tensors.push((name.to_string(), t.clone())));
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in tensors {
            put_str(&mut out, &name);
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(HagcnError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HagcnError::Checkpoint(format!("unsupported version {version}")));
        }
        let config = RunConfig::parse(&r.string()?)?;
        let n = r.u32()? as usize;
        let node_ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let d = r.u32()? as usize;
        let mean = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut stored = HashMap::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length matches shape");
            stored.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(HagcnError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let mut params = zero_params(&config.model, n)?;
        let mut problem = None;
        params.for_each_mut("", &mut |name, t| match stored.remove(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                problem.get_or_insert(format!("tensor `{name}` has shape {:?}, expected {:?}", v.shape(), t.shape()));
            }
            None => {
                problem.get_or_insert(format!("tensor `{name}` missing"));
            }
        });
        if let Some(p) = problem {
            return Err(HagcnError::Checkpoint(p));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(HagcnError::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config,
            node_ids,
            normalizer: Normalizer { mean, std },
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| HagcnError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| HagcnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| HagcnError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
