//! `PRWM` tensor checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"PRWM"
//! version  u16
//! records  until end of file:
//!   name_len u32, name (UTF-8), rank u32, dims u64 × rank, values f64 × Π dims
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PRWM";
pub const VERSION: u16 = 1;

pub fn encode_tensors<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic, not a PRWM checkpoint".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for `{name}`")));
        }
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| Error::Format("tensor too large".into()))?;
        if len > (buf.len() - cur.pos) / 8 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let bytes = cur.take(len * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(out)
}

pub fn save_tensors<'a, I>(path: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let bytes = encode_tensors(tensors);
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_tensors(&buf)
}

impl ParamSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, self.named_tensors())
    }

    pub fn load_from(&mut self, path: &Path) -> Result<()> {
        let tensors = load_tensors(path)?;
        self.load_named(&tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            seed in 0u64..1000,
        ) {
            let mut p = ParamSet::new(seed);
            p.add_uniform("layer.weight", &[2, 3], 2);
            p.add_tensor("raw", Tensor::from_vec(&[vals.len()], vals.clone()).unwrap());
            let bytes = encode_tensors(p.named_tensors());
            let back = decode_tensors(&bytes).unwrap();
            prop_assert_eq!(back.len(), 2);
            for ((n1, t1), (n2, t2)) in p.named_tensors().zip(&back) {
                prop_assert_eq!(n1, n2.as_str());
                prop_assert_eq!(t1.shape(), t2.shape());
                for (a, b) in t1.data().iter().zip(t2.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new(1);
        p.add_uniform("w", &[4], 1);
        let mut bytes = encode_tensors(p.named_tensors());
        assert!(decode_tensors(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_tensors(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.prwm");
        let mut p = ParamSet::new(3);
        p.add_uniform("w", &[3, 3], 3);
        p.save(&path).unwrap();
        let mut q = ParamSet::new(99);
        q.add_uniform("w", &[3, 3], 3);
        q.load_from(&path).unwrap();
        assert_eq!(p.checksum(), q.checksum());
    }
}
