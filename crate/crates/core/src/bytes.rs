//! Offset-tracking reader shared by the binary formats.

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) struct ByteReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn err(&self, message: String) -> Error {
        Error::Parse { offset: self.offset, message }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            let at = self.offset + got;
            return Err(Error::Parse {
                offset: at,
                message: format!("truncated: needed {n} bytes, found {got}"),
            });
        }
        self.offset += n;
        Ok(buf)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let v = self.bytes(N)?;
        Ok(v.try_into().expect("length N"))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
