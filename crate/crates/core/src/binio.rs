//! Little-endian helpers shared by the binary file formats.
//!
//! Every format here is `magic (4 bytes) | u32 version | body | u32 crc32`,
//! where the checksum covers everything before it.

use crate::{Error, Result};

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) {
        for v in vs {
            self.f32(v);
        }
    }

    pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.f64(v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Appends the checksum and returns the finished file contents.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and trailing checksum, and positions the reader
    /// at the start of the body.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u32, what: &'static str) -> Result<Self> {
        if buf.len() < 8 {
            return Err(Error::Format(format!(
                "{what}: file is {} bytes, too short for a header (expected at least 12)",
                buf.len()
            )));
        }
        if &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic bytes {:?}, expected {:?}",
                String::from_utf8_lossy(&buf[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let found = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::Format(format!(
                "{what}: unsupported format version {found}, expected {version}"
            )));
        }
        Ok(Self { buf, pos: 8, what })
    }

    /// Verifies that exactly `body_len` bytes follow the current position,
    /// plus the checksum, and that the checksum matches.
    pub fn expect_remaining(&self, body_len: usize) -> Result<()> {
        let expected = self.pos + body_len + 4;
        if self.buf.len() != expected {
            return Err(Error::Format(format!(
                "{}: expected {expected} bytes, found {} (file truncated or padded)",
                self.what,
                self.buf.len()
            )));
        }
        let payload = &self.buf[..self.buf.len() - 4];
        let stored = u32::from_le_bytes(self.buf[self.buf.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Format(format!(
                "{}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})",
                self.what
            )));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // Leave room for the trailing checksum.
        let end = self.pos + n;
        if end + 4 > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: expected at least {} bytes, found {}",
                self.what,
                end + 4,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: count {v} does not fit in memory", self.what)))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    /// Fails unless only the checksum is left.
    pub fn finish(self) -> Result<()> {
        if self.pos + 4 != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} unexpected trailing bytes",
                self.what,
                self.buf.len() - self.pos - 4
            )));
        }
        Ok(())
    }
}
