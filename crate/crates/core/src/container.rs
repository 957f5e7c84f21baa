//! Little-endian binary helpers shared by the checkpoint (`LFTM`), adapter
//! (`LFTA`) and dataset (`LFDS`) formats.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"LFTM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice; every read names what it was reading so a
/// truncated file produces a useful "unexpected EOF" error.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::UnexpectedEof(what.to_owned())),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed(format!("{what}: size overflow")))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Writes an `LFTM` checkpoint: magic, version, JSON architecture descriptor
/// (u32 length prefix), then raw f32 blobs in declaration order.
pub fn encode_model<D: Serialize>(descriptor: &D, blobs: &[&[f32]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(descriptor)?;
    let mut w = ByteWriter::new();
    w.bytes(MODEL_MAGIC).u32(MODEL_VERSION).u32(json.len() as u32).bytes(&json);
    for b in blobs {
        w.f32s(b);
    }
    Ok(w.finish())
}

/// Parses the `LFTM` header and returns the descriptor plus a reader
/// positioned at the first parameter blob.
pub fn decode_model_header<D: DeserializeOwned>(bytes: &[u8]) -> Result<(D, ByteReader<'_>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = r.u32("descriptor length")? as usize;
    let json = r.take(len, "architecture descriptor")?;
    let descriptor = serde_json::from_slice(json)?;
    Ok((descriptor, r))
}

/// Writes through a temporary sibling file and renames, so readers never see
/// a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_read_names_field() {
        let mut r = ByteReader::new(&[1, 2, 3]);
        assert!(matches!(r.u32("count"), Err(Error::UnexpectedEof(w)) if w == "count"));
    }

    #[test]
    fn model_header_roundtrip() {
        let bytes = encode_model(&serde_json::json!({"width": 4}), &[&[1.0, 2.0], &[3.0]]).unwrap();
        let (d, mut r): (serde_json::Value, _) = decode_model_header(&bytes).unwrap();
        assert_eq!(d["width"], 4);
        assert_eq!(r.f32s(3, "params").unwrap(), vec![1.0, 2.0, 3.0]);
        r.expect_end().unwrap();
    }
}
