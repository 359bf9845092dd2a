//! `WLSS1` container of named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  "WLSS1"
//! count   u32      number of entries
//! entry*  name_len u32, name (UTF-8), rank u32, extents u64 × rank,
//!         values   f64 × product(extents)
//! ```
//!
//! A rank-0 entry holds one value. Entry order is preserved, so encoding is
//! deterministic for a given insertion order.

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"WLSS1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.insert(name, Tensor::new(vec![], vec![value])?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.numel() != 1 {
            return Err(Error::Checkpoint(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a WLSS1 checkpoint".into()));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
            ck.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let mut ck = Checkpoint::new();
        ck.insert("ab", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = ck.encode();
        assert_eq!(&bytes[..5], b"WLSS1");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..15], b"ab");
        assert_eq!(&bytes[15..19], &1u32.to_le_bytes());
        assert_eq!(&bytes[19..27], &2u64.to_le_bytes());
        assert_eq!(&bytes[27..35], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 43);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("s", 4.0).unwrap();
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(ck.insert_scalar("s", 1.0).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_exact(
            entries in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..6,
            )
        ) {
            let mut ck = Checkpoint::new();
            for (i, (shape, seed)) in entries.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| f64::from_bits(seed.wrapping_add(j as u64 * 0x9E37_79B9)) ).map(|v| if v.is_finite() { v } else { 0.5 }).collect();
                ck.insert(format!("p{i}"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
            }
            let back = Checkpoint::decode(&ck.encode()).unwrap();
            prop_assert_eq!(back.encode(), ck.encode());
            prop_assert_eq!(back.len(), ck.len());
        }
    }
}
