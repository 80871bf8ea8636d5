//! Little-endian binary parsing with byte-offset error reporting, shared by
//! the embedding and checkpoint file formats.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'p, R> {
    pub inner: R,
    pub path: &'p Path,
    pub offset: u64,
}

impl<'p, R: Read> ByteReader<'p, R> {
    pub fn new(inner: R, path: &'p Path) -> ByteReader<'p, R> {
        ByteReader {
            inner,
            path,
            offset: 0,
        }
    }

    pub fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::format(
                self.path,
                self.offset,
                format!(
                    "unexpected end of file while reading {what} ({} bytes)",
                    buf.len()
                ),
            )),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Reject any bytes past the declared end of the file.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if self
            .inner
            .read(&mut probe)
            .map_err(|e| Error::io(self.path, e))?
            != 0
        {
            return Err(Error::format(
                self.path,
                self.offset,
                "trailing data after declared record count",
            ));
        }
        Ok(())
    }
}
