//! Internal little-endian binary I/O helpers with precise error reporting.
//!
//! Readers track the byte offset so a short file yields
//! [`Error::Truncated`](crate::Error::Truncated) naming the exact position
//! of the read that failed; writers map failures to
//! [`Error::Io`](crate::Error::Io) carrying the path.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub(crate) struct BinReader<R> {
    inner: R,
    path: String,
    offset: u64,
}

pub(crate) fn open_reader(path: &Path) -> Result<BinReader<BufReader<File>>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BinReader::new(BufReader::new(file), path))
}

impl<R: Read> BinReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        BinReader {
            inner,
            path: path.display().to_string(),
            offset: 0,
        }
    }

    /// Byte offset of the next read (everything before it succeeded).
    #[cfg(test)]
    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn path(&self) -> &str {
        &self.path
    }

    pub(crate) fn read_bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Truncated {
                path: self.path.clone(),
                offset: self.offset,
            }),
            Err(source) => Err(Error::Io {
                path: self.path.clone(),
                source,
            }),
        }
    }

    pub(crate) fn read_u8(&mut self) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.read_bytes(&mut buf)?;
        Ok(buf[0])
    }

    pub(crate) fn read_u16(&mut self) -> Result<u16> {
        let mut buf = [0u8; 2];
        self.read_bytes(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }

    pub(crate) fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_bytes(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub(crate) fn read_f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.read_bytes(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    /// Confirm exactly the expected magic bytes come next.
    pub(crate) fn expect_magic(&mut self, magic: &[u8], kind: &'static str) -> Result<()> {
        let mut buf = vec![0u8; magic.len()];
        self.read_bytes(&mut buf)?;
        if buf != magic {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected: kind,
            });
        }
        Ok(())
    }
}

pub(crate) struct BinWriter<W> {
    inner: W,
    path: String,
}

pub(crate) fn create_writer(path: &Path) -> Result<BinWriter<BufWriter<File>>> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BinWriter {
        inner: BufWriter::new(file),
        path: path.display().to_string(),
    })
}

impl<W: Write> BinWriter<W> {
    pub(crate) fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub(crate) fn write_u8(&mut self, v: u8) -> Result<()> {
        self.write_bytes(&[v])
    }

    pub(crate) fn write_u16(&mut self, v: u16) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub(crate) fn write_u32(&mut self, v: u32) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub(crate) fn write_f64(&mut self, v: f64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        let w = create_writer(&path).unwrap();
        let mut w = w;
        w.write_bytes(b"MAGI").unwrap();
        w.write_u8(7).unwrap();
        w.write_u16(513).unwrap();
        w.write_u32(100_000).unwrap();
        w.write_f64(-1.5).unwrap();
        w.finish().unwrap();

        let mut r = open_reader(&path).unwrap();
        r.expect_magic(b"MAGI", "test blob").unwrap();
        assert_eq!(r.read_u8().unwrap(), 7);
        assert_eq!(r.read_u16().unwrap(), 513);
        assert_eq!(r.read_u32().unwrap(), 100_000);
        assert_eq!(r.read_f64().unwrap(), -1.5);
        assert_eq!(r.offset(), 4 + 1 + 2 + 4 + 8);
        // one byte past the end truncates at the current offset
        match r.read_u8().unwrap_err() {
            Error::Truncated { offset, .. } => assert_eq!(offset, 19),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        let mut w = create_writer(&path).unwrap();
        w.write_bytes(b"NOPE").unwrap();
        w.finish().unwrap();
        let mut r = open_reader(&path).unwrap();
        assert!(matches!(
            r.expect_magic(b"MAGI", "test blob").unwrap_err(),
            Error::BadMagic { .. }
        ));
    }
}
