//! Little-endian binary encoding shared by every file format.
//!
//! Each file starts with a 4-byte magic and a `u32` version. Float payloads are
//! stored as f32; the in-memory f64 values are kept f32-representable so a
//! round trip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut e = Self { buf: Vec::new() };
        e.buf.extend_from_slice(magic);
        e.u32(version);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Parameter(format!("dimension {v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn u32s(&mut self, vs: &[usize]) -> Result<()> {
        for &v in vs {
            self.usize32(v)?;
        }
        Ok(())
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Checks magic and version before handing back a decoder positioned
    /// after the header.
    pub fn new(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut d = Self { buf, pos: 0 };
        let found: [u8; 4] = d.take(4)?.try_into().unwrap();
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        let v = d.u32()?;
        if v != version {
            return Err(Error::UnsupportedVersion {
                found: v,
                supported: version,
            });
        }
        Ok(d)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.malformed("element count overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.malformed("element count overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut e = Encoder::new(b"TEST", 1);
        e.u32(7);
        let bytes = e.finish();
        let mut d = Decoder::new(&bytes[..10], b"TEST", 1).unwrap();
        match d.u32() {
            Err(Error::Truncated {
                offset, available, ..
            }) => {
                assert_eq!(offset, 8);
                assert_eq!(available, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_checks() {
        let bytes = Encoder::new(b"ABCD", 2).finish();
        assert!(matches!(
            Decoder::new(&bytes, b"ABCE", 2),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Decoder::new(&bytes, b"ABCD", 1),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
