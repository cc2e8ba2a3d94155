//! Checksummed binary container of named f32 tensors plus a text header.
//!
//! Layout (little endian): magic `DPTC`, format version (u32), kind (u32),
//! header length (u32) and UTF-8 header, tensor count (u32), then per tensor
//! name length (u32), name, rank (u32), dims (u64 each) and f32 payload, and
//! finally a CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use dpte_autograd::Tensor;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DPTC";
pub const FORMAT_VERSION: u32 = 1;

/// What a container holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Checkpoint = 1,
    Weights = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, self.kind as u32);
        put_u32(&mut buf, self.header.len() as u32);
        buf.extend_from_slice(self.header.as_bytes());
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let incompatible = |reason: String| Error::Incompatible {
            path: path.to_path_buf(),
            reason,
        };
        let corrupt = || Error::Checksum(path.to_path_buf());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(incompatible("not a model container".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        if bytes.len() < 12 {
            return Err(corrupt());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt());
        }
        let mut r = Reader { buf: body, pos: 8 };
        let kind = match r.u32().ok_or_else(corrupt)? {
            1 => Kind::Checkpoint,
            2 => Kind::Weights,
            k => return Err(incompatible(format!("unknown container kind {k}"))),
        };
        let hlen = r.u32().ok_or_else(corrupt)? as usize;
        let header = String::from_utf8(r.take(hlen).ok_or_else(corrupt)?.to_vec())
            .map_err(|_| incompatible("header is not UTF-8".into()))?;
        let count = r.u32().ok_or_else(corrupt)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(corrupt)? as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(corrupt)?.to_vec())
                .map_err(|_| incompatible("tensor name is not UTF-8".into()))?;
            let rank = r.u32().ok_or_else(corrupt)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.take(8).ok_or_else(corrupt)?;
                shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n).ok_or_else(corrupt)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != body.len() {
            return Err(corrupt());
        }
        Ok(Self { kind, header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            kind: Kind::Weights,
            header: "a = 1\n".into(),
            tensors: vec![
                ("w".into(), Tensor::from_fn(vec![2, 3], |i| i as f32)),
                ("b".into(), Tensor::scalar(0.5)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes(), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn truncation_and_bit_flips_fail_the_checksum() {
        let bytes = sample().to_bytes();
        let p = Path::new("x");
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 7], p), Err(Error::Checksum(_))));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(Container::from_bytes(&flipped, p), Err(Error::Checksum(_))));
    }

    #[test]
    fn other_versions_are_incompatible() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 0;
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(Error::Incompatible { .. })));
    }
}
