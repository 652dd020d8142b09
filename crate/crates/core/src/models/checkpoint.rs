//! Versioned parameter container.
//!
//! Layout: `b"CYCK"`, `u16` version (1), `u32` entry count, then per entry a
//! `u32` name length, UTF-8 name, `u32` rank, `rank` × `u32` dims and the
//! little-endian `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CYCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("truncated checkpoint, needed {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    /// Snapshot of the store entries whose names satisfy `keep`.
    pub fn from_store(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Self {
        Checkpoint {
            entries: store
                .iter()
                .filter(|(_, n, _)| keep(n))
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Copies entries into `store`. Every entry must name an existing
    /// parameter of identical shape, and every store parameter accepted by
    /// `required` must be present.
    pub fn apply_to(&self, store: &mut ParamStore, required: impl Fn(&str) -> bool) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.entries {
            let id = store
                .find(name)
                .ok_or_else(|| Error::input(format!("checkpoint parameter {name} is not part of the model")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::dim("checkpoint", store.get(id).shape(), t.shape()));
            }
            seen.insert(name.as_str());
        }
        if let Some((_, missing, _)) = store.iter().find(|(_, n, _)| required(n) && !seen.contains(n)) {
            return Err(Error::input(format!("checkpoint lacks parameter {missing}")));
        }
        for (name, t) in &self.entries {
            let id = store.find(name).expect("validated above");
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected CYCK".into(),
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at,
                    message: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::numeric(format!("checkpoint parameter {name} holds a non-finite value")));
            }
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: "trailing bytes after last entry".into(),
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}
