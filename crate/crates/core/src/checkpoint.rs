//! "MVC1" checkpoint files: configuration text plus every named tensor.
//!
//! Layout (little-endian): magic `MVC1`, u32 version, u64-length-prefixed
//! config text, u64 tensor count, then per tensor a u32-length-prefixed name,
//! u8 rank, u64 dims, u8 precision flag (0 = f32, 1 = f64) and the row-major
//! payload.

use std::path::Path;

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::model::validate_shapes;
use crate::params::{Mat, ModelParams};

const MAGIC: &[u8; 4] = b"MVC1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: RunConfig, params: ModelParams) -> Self {
        Self { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        let wide = self.config.model.precision == Precision::F64;
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            out.push(u8::from(wide));
            for &x in t.iter() {
                if wide {
                    out.extend_from_slice(&x.to_le_bytes());
                } else {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses and validates every tensor against the embedded config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an MVC1 file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.len64()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let count = r.len64()?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0];
            let dims: Vec<usize> = (0..rank).map(|_| r.len64()).collect::<Result<_>>()?;
            let shape = match dims[..] {
                [n] => (1, n),
                [a, b] => (a, b),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has unsupported rank {rank}"
                    )))
                }
            };
            let wide = match r.take(1)?[0] {
                0 => false,
                1 => true,
                f => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has unknown precision flag {f}"
                    )))
                }
            };
            let n = shape.0.checked_mul(shape.1).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}' dims overflow"))
            })?;
            let width = if wide { 8 } else { 4 };
            let raw = r.take(n.checked_mul(width).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}' dims overflow"))
            })?)
            .map_err(|_| Error::Checkpoint(format!("tensor '{name}' payload truncated")))?;
            let values: Vec<f64> = if wide {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect()
            };
            let t = Mat::from_shape_vec(shape, values).expect("length checked");
            if params.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
            params.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        if let Err(name) = params.all_finite() {
            return Err(Error::Checkpoint(format!("tensor '{name}' holds non-finite values")));
        }
        validate_shapes(&params, &config.model)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }
}
