//! Named-array archive with JSON metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FLMMARC1"
//! u64 metadata length, metadata JSON bytes
//! u64 array count
//! per array: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data[∏dims]
//! ```
//!
//! Arrays are written in name order, so equal archives serialise to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FLMMARC1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.buf.len() - self.pos >= n,
            Format,
            "archive truncated at byte {}",
            self.pos
        );
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    /// Inserts every tensor of `store` as `<prefix>/<name>`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.arrays.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Collects every array under `<prefix>/` into a store.
    pub fn take_store(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}/");
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            if let Some(rest) = name.strip_prefix(&lead) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive lacks array `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialise");
        let mut out = Vec::with_capacity(meta.len() + 64 + self.arrays.values().map(|t| t.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        ensure!(r.take(8)? == MAGIC, Format, "not an archive (bad magic)");
        let n = r.len()?;
        let metadata = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("archive metadata: {e}")))?;
        let count = r.len()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array `{name}` is too large")))?;
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ensure!(!arrays.contains_key(&name), Format, "duplicate array `{name}`");
            arrays.insert(name, Tensor::new(&shape, data)?);
        }
        ensure!(r.pos == buf.len(), Format, "{} trailing bytes after archive", buf.len() - r.pos);
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Archive::new(serde_json::json!({"k": [1, 2], "s": "x"}));
        a.arrays.insert("b/w".into(), Tensor::randn(&[3, 4], 1.0, &mut rng));
        a.arrays.insert("a".into(), Tensor::from_parts(&[3], vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        a.arrays.insert("s".into(), Tensor::scalar(0.1));
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(b.to_bytes(), bytes);
        for (k, t) in &a.arrays {
            let u = &b.arrays[k];
            assert_eq!(t.shape(), u.shape());
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(b.metadata, a.metadata);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let a = Archive::new(serde_json::json!({}));
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"NOTANARC").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
    }

    #[test]
    fn store_prefixes() {
        let mut s = ParamStore::new();
        s.insert("x.weight", Tensor::zeros(&[2]));
        let mut a = Archive::default();
        a.put_store("dec", &s);
        a.put_store("decx", &s);
        assert_eq!(a.take_store("dec"), s);
    }
}
