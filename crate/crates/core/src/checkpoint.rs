//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SEMCKPT\0"
//! version  u32
//! seed     u64
//! meta     u32 length + UTF-8 text (optimizer, init scheme, stage, ...)
//! count    u32
//! entries  count × { u32 name length, name, u32 ndim, ndim × u64, f64 data }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub metadata: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, metadata: impl Into<String>) -> Self {
        Checkpoint {
            seed,
            metadata: metadata.into(),
            entries: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the entry of the same name.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, checkpoint has {:?}",
                    store.get(id).shape(),
                    src.shape()
                )));
            }
            *store.get_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let seed = r.u64()?;
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { seed, metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamGroup::Fuser, Tensor::matrix(2, 2, vec![1.0, -2.5, 0.0, 1e-300]).unwrap())
            .unwrap();
        s.add("b", ParamGroup::Semantic, Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        Checkpoint::from_store(&s, 42, "optimizer=adam")
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn apply_checks_shapes() {
        let c = sample();
        let mut s = ParamStore::new();
        s.add("b", ParamGroup::Semantic, Tensor::zeros(vec![2]).unwrap()).unwrap();
        assert!(c.apply_to(&mut s).is_err());
        let mut s = ParamStore::new();
        let id = s.add("b", ParamGroup::Semantic, Tensor::zeros(vec![1]).unwrap()).unwrap();
        c.apply_to(&mut s).unwrap();
        assert_eq!(s.get(id).item().unwrap(), f64::MIN_POSITIVE);
    }
}
