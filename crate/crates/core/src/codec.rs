//! Little-endian byte buffer helpers shared by the descriptor, representation
//! and container formats. Every read reports the byte offset it failed at.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    /// Row-major: rows, cols, then rows*cols values.
    pub fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for &x in m.iter() {
            self.f64(x);
        }
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self.take(N)?;
        let mut a = [0u8; N];
        a.copy_from_slice(s);
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// Reads an f32 and rejects NaN/inf at the offset it started.
    pub fn finite_f32(&mut self) -> Result<f32> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.array()?);
        if !v.is_finite() {
            return Err(Error::NonFinite { offset: at });
        }
        Ok(v)
    }

    pub fn finite_f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.array()?);
        if !v.is_finite() {
            return Err(Error::NonFinite { offset: at });
        }
        Ok(v)
    }

    /// Length-prefixed count, checked against the bytes left so a corrupt
    /// length can never trigger a huge allocation.
    pub fn len_prefix(&mut self, elem_size: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let need = (n as u128) * (elem_size as u128);
        if need > self.remaining() as u128 {
            return Err(Error::Truncated {
                offset: at,
                needed: need.min(usize::MAX as u128) as usize,
                available: self.remaining(),
            });
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.len_prefix(1)?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::MalformedHeader {
            offset: at,
            reason: "string is not valid utf-8".into(),
        })
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.finite_f64()).collect()
    }

    pub fn matrix(&mut self) -> Result<Array2<f64>> {
        let at = self.pos;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| Error::MalformedHeader {
            offset: at,
            reason: "matrix shape overflows".into(),
        })?;
        if count.saturating_mul(8) > self.remaining() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: count.saturating_mul(8),
                available: self.remaining(),
            });
        }
        let data = (0..count)
            .map(|_| self.finite_f64())
            .collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
