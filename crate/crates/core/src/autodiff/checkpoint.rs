//! Flat binary weight files.
//!
//! Layout (all integers little-endian `u32`):
//! `"SSEG"`, version, tensor count, then per tensor: name length, UTF-8 name,
//! rank, dims, and the values as little-endian `f64`.

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor);

pub fn write_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = vec![("w".to_string(), Tensor::new(vec![2], vec![1.0, -2.5]).unwrap())];
        let bytes = write_checkpoint(&t);
        let mut want = b"SSEG".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'w');
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-2.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(read_checkpoint(b"NOPE").is_err());
        let mut b = write_checkpoint(&[("a".into(), Tensor::zeros(vec![3, 1]))]);
        b.pop();
        assert!(read_checkpoint(&b).is_err());
        let mut b = write_checkpoint(&[]);
        b.push(0);
        assert!(read_checkpoint(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..4, 0..4), name in "[a-z.0-9]{1,12}", seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 7.0 - 50.0).collect();
            let t = vec![(name, Tensor::new(dims, data).unwrap())];
            prop_assert_eq!(read_checkpoint(&write_checkpoint(&t)).unwrap(), t);
        }
    }
}
