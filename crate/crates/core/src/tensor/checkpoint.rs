//! Flat binary parameter container.
//!
//! Layout (all integers `u64` little-endian):
//!
//! ```text
//! "OPAMA001" | count | count × (name_len | name UTF-8 | rank | extents… | f64 LE payload)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OPAMA001";

/// Ordered named tensors, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint { records: store.iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy every parameter of `store` from the record of the same name.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no parameter {name}")))?;
            store.set(id, t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(8 * t.numel());
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an OPAMA001 checkpoint".into()));
        }
        let count = read_u64(&mut r)?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = read_len(&mut r, 1 << 16)?;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_len(&mut r, 16)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_len(&mut r, 1 << 32)?);
            }
            let n: usize = shape.iter().product();
            if n > 1 << 31 {
                return Err(Error::Checkpoint(format!("record {name} too large")));
            }
            let mut raw = vec![0u8; 8 * n];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(r: &mut impl Read, limit: u64) -> Result<usize> {
    let v = read_u64(r)?;
    if v > limit {
        return Err(Error::Checkpoint(format!("implausible length {v}")));
    }
    Ok(v as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint { records: vec![("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)), ("b".into(), Tensor::scalar(-2.5))] }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"OPAMA001");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 8);
        assert_eq!(&bytes[24..32], b"a.weight");
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 2);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bytes[..]), Err(Error::Checkpoint(_))));
    }
}
