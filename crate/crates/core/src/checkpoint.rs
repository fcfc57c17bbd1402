//! Versioned binary container for training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length, `u32`
//! CRC-32 of the payload, then the payload. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"TBGNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_container(path: &Path, payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    bytes.extend_from_slice(payload);
    let tmp = path.with_extension("tmp");
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("create"), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(ctx("write"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("sync"), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
}

pub fn read_container(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read checkpoint {}", path.display()), e))?;
    let corrupt = |reason: String| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let crc = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(corrupt(format!("payload is {} bytes, header says {len}", payload.len())));
    }
    if crc32fast::hash(payload) != crc {
        return Err(corrupt("checksum mismatch".into()));
    }
    Ok(payload.to_vec())
}

#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// A list of arrays, prefixed by its length.
    pub fn arrays<'a>(&mut self, arrays: impl ExactSizeIterator<Item = &'a [f64]>) {
        self.u64(arrays.len() as u64);
        for a in arrays {
            self.f64s(a);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> PayloadReader<'a> {
    pub fn new(data: &'a [u8], path: &Path) -> Self {
        Self {
            data,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn corrupt(&self, reason: String) -> Error {
        Error::Integrity {
            path: self.path.clone(),
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.corrupt(format!("payload ends early at byte {}", self.pos)));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.data.len() - self.pos) {
            return Err(self.corrupt(format!("length {n} exceeds the payload")));
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        let b = self.bytes()?;
        std::str::from_utf8(b).map_err(|_| self.corrupt("invalid UTF-8 text".into()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    /// Reads a list written by [`PayloadWriter::arrays`] into `targets`,
    /// which must match it in count and lengths.
    pub fn arrays_into(&mut self, targets: Vec<&mut [f64]>, what: &str) -> Result<()> {
        let n = self.len(8)?;
        if n != targets.len() {
            return Err(self.corrupt(format!("{what}: {n} arrays stored, {} expected", targets.len())));
        }
        for (i, t) in targets.into_iter().enumerate() {
            let v = self.f64s()?;
            if v.len() != t.len() {
                return Err(self.corrupt(format!("{what}: array {i} has {} values, {} expected", v.len(), t.len())));
            }
            t.copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_payload() -> Vec<u8> {
        let mut w = PayloadWriter::new();
        w.str("header");
        w.u64(42);
        w.arrays([&[1.5, -0.0][..], &[f64::MIN_POSITIVE][..]].into_iter());
        w.finish()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_container(&path, &sample_payload()).unwrap();
        let payload = read_container(&path).unwrap();
        let mut r = PayloadReader::new(&payload, &path);
        assert_eq!(r.str().unwrap(), "header");
        assert_eq!(r.u64().unwrap(), 42);
        let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 1]);
        r.arrays_into(vec![&mut a, &mut b], "test").unwrap();
        assert_eq!(a[0], 1.5);
        assert!(a[1].is_sign_negative());
        assert_eq!(b[0], f64::MIN_POSITIVE);
        r.finish().unwrap();
    }

    #[test]
    fn damage_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_container(&path, &sample_payload()).unwrap();
        let good = fs::read(&path).unwrap();

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Integrity { .. })));
        fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Integrity { .. })));

        let mut flipped = good.clone();
        *flipped.last_mut().unwrap() ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Integrity { .. })));

        let mut newer = good.clone();
        newer[8..12].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &newer).unwrap();
        match read_container(&path) {
            Err(Error::Version { found, expected, .. }) => assert_eq!((found, expected), (7, FORMAT_VERSION)),
            other => panic!("expected a version error, got {other:?}"),
        }

        let mut r = PayloadReader::new(&good[HEADER_LEN..], &path);
        r.str().unwrap();
        r.u64().unwrap();
        let mut wrong = vec![0.0; 3];
        let mut b = vec![0.0; 1];
        assert!(r.arrays_into(vec![&mut wrong, &mut b], "test").is_err());
    }
}
