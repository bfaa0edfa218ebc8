//! Versioned binary container shared by every on-disk artifact (statistics,
//! tensors, dataset caches, checkpoints).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[8] | version u32 | entry_count u32 | entry* | sha256[32]
//! entry := name_len u16 | name utf8 | tag u8 | body
//!   tag 0 (text):  len u64 | utf8 bytes
//!   tag 1 (f64):   rank u8 | dims u64 * rank | f64 * prod(dims)
//!   tag 2 (bytes): len u64 | raw bytes
//! ```
//!
//! The trailing digest covers every preceding byte. Floats are stored as
//! raw IEEE-754 bits, so round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const TAG_TEXT: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_BYTES: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Text(String),
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct Container {
    pub magic: [u8; 8],
    pub version: u32,
    entries: Vec<(String, Payload)>,
}

impl Container {
    pub fn new(magic: [u8; 8], version: u32) -> Self {
        Self {
            magic,
            version,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Payload) {
        self.entries.push((name.into(), payload));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.push(name, Payload::Text(text.into()));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            name,
            Payload::F64 {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.push(name, Payload::Bytes(bytes));
    }

    pub fn entries(&self) -> &[(String, Payload)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Payload::Text(t)) => Ok(t),
            _ => Err(Error::format("container", format!("missing text entry `{name}`"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Payload::F64 { shape, data }) => Ok((shape, data)),
            _ => Err(Error::format("container", format!("missing f64 entry `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Payload::Bytes(b)) => Ok(b),
            _ => Err(Error::format("container", format!("missing bytes entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match payload {
                Payload::Text(t) => {
                    out.push(TAG_TEXT);
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
                Payload::F64 { shape, data } => {
                    out.push(TAG_F64);
                    out.push(shape.len() as u8);
                    for d in shape {
                        out.extend_from_slice(&(*d as u64).to_le_bytes());
                    }
                    out.reserve(data.len() * 8);
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(b) => {
                    out.push(TAG_BYTES);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a container, checking magic, version and digest.
    pub fn from_bytes(bytes: &[u8], magic: [u8; 8], max_version: u32) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(Error::format("container", "truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format("container", "checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let found: [u8; 8] = r.take(8)?.try_into().unwrap();
        if found != magic {
            return Err(Error::format(
                "container",
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&found),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let version = r.u32()?;
        if version == 0 || version > max_version {
            return Err(Error::format(
                "container",
                format!("unsupported version {version} (max {max_version})"),
            ));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new(magic, version);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("container", "entry name is not utf8"))?
                .to_string();
            let payload = match r.u8()? {
                TAG_TEXT => {
                    let len = r.u64()? as usize;
                    let s = std::str::from_utf8(r.take(len)?)
                        .map_err(|_| Error::format("container", "text entry is not utf8"))?;
                    Payload::Text(s.to_string())
                }
                TAG_F64 => {
                    let rank = r.u8()? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.u64()? as usize);
                    }
                    let n: usize = shape.iter().product();
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                        Error::format("container", "array too large")
                    })?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Payload::F64 { shape, data }
                }
                TAG_BYTES => {
                    let len = r.u64()? as usize;
                    Payload::Bytes(r.take(len)?.to_vec())
                }
                t => return Err(Error::format("container", format!("unknown tag {t}"))),
            };
            c.entries.push((name, payload));
        }
        if r.pos != body.len() {
            return Err(Error::format("container", "trailing bytes"));
        }
        Ok(c)
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, magic: [u8; 8], max_version: u32) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, magic, max_version).map_err(|e| match e {
            Error::Format { reason, .. } if reason == "checksum mismatch" => {
                Error::Corrupt(path.to_path_buf())
            }
            Error::Format { what, reason } => Error::Format {
                what: format!("{what} {}", path.display()),
                reason,
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("container", "truncated entry"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAGIC: [u8; 8] = *b"TESTCONT";

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(data in proptest::collection::vec(any::<f64>(), 0..64),
                                   text in ".{0,40}",
                                   raw in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut c = Container::new(MAGIC, 1);
            c.push_f64("a", &[data.len()], data.clone());
            c.push_text("t", text.clone());
            c.push_bytes("b", raw.clone());
            let back = Container::from_bytes(&c.to_bytes(), MAGIC, 1).unwrap();
            let (shape, got) = back.f64("a").unwrap();
            prop_assert_eq!(shape, &[data.len()][..]);
            let bits: Vec<u64> = got.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
            prop_assert_eq!(back.text("t").unwrap(), text.as_str());
            prop_assert_eq!(back.bytes("b").unwrap(), raw.as_slice());
        }
    }

    #[test]
    fn rejects_flipped_byte_and_wrong_magic() {
        let mut c = Container::new(MAGIC, 1);
        c.push_text("x", "hello");
        let mut bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes, *b"OTHERMAG", 1).is_err());
        bytes[20] ^= 0xff;
        assert!(Container::from_bytes(&bytes, MAGIC, 1).is_err());
    }

    #[test]
    fn rejects_future_version() {
        let c = Container::new(MAGIC, 3);
        assert!(Container::from_bytes(&c.to_bytes(), MAGIC, 2).is_err());
    }
}
