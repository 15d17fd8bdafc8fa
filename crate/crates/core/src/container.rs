//! Named-array binary container.
//!
//! One self-describing file format backs every persisted artifact: shape
//! basis exports, prior/generator checkpoints, and optimizer state. The
//! layout is length-prefixed little-endian throughout and ends with a
//! SHA-256 digest over the payload, so a corrupt or truncated blob fails
//! loudly instead of loading partially.
//!
//! ```text
//! magic "SSAC" | version string | entry count |
//!   { name | dtype | ndim | dims... | raw bytes }* | sha256
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSAC";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I64(Vec<i64>),
    Bytes(Vec<u8>),
}

impl Entry {
    fn dtype_tag(&self) -> u8 {
        match self {
            Entry::F32(_) => 0,
            Entry::F64(_) => 1,
            Entry::I64(_) => 2,
            Entry::Bytes(_) => 3,
        }
    }
}

/// Ordered collection of named entries plus a format-version string.
///
/// Entry order is insertion order and is preserved on write, so writing
/// the same logical content twice produces byte-identical files.
#[derive(Debug, Clone, Default)]
pub struct Container {
    version: String,
    names: Vec<String>,
    entries: HashMap<String, Entry>,
}

impl Container {
    pub fn new(version: &str) -> Self {
        Container {
            version: version.to_string(),
            names: Vec::new(),
            entries: HashMap::new(),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn put(&mut self, name: &str, entry: Entry) {
        if !self.entries.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.entries.insert(name.to_string(), entry);
    }

    pub fn put_f32(&mut self, name: &str, value: ArrayD<f32>) {
        self.put(name, Entry::F32(value));
    }

    pub fn put_f64(&mut self, name: &str, value: ArrayD<f64>) {
        self.put(name, Entry::F64(value));
    }

    pub fn put_i64(&mut self, name: &str, value: Vec<i64>) {
        self.put(name, Entry::I64(value));
    }

    pub fn put_bytes(&mut self, name: &str, value: Vec<u8>) {
        self.put(name, Entry::Bytes(value));
    }

    pub fn put_str(&mut self, name: &str, value: &str) {
        self.put(name, Entry::Bytes(value.as_bytes().to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing entry '{name}'")))
    }

    pub fn f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self.get(name)? {
            Entry::F32(a) => Ok(a),
            _ => Err(Error::Container(format!("entry '{name}' is not f32"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.get(name)? {
            Entry::F64(a) => Ok(a),
            _ => Err(Error::Container(format!("entry '{name}' is not f64"))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<&[i64]> {
        match self.get(name)? {
            Entry::I64(v) => Ok(v),
            _ => Err(Error::Container(format!("entry '{name}' is not i64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Entry::Bytes(v) => Ok(v),
            _ => Err(Error::Container(format!("entry '{name}' is not bytes"))),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes(name)?)
            .map_err(|_| Error::Container(format!("entry '{name}' is not utf-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        write_str(&mut payload, &self.version);
        write_u64(&mut payload, self.names.len() as u64);
        for name in &self.names {
            let entry = &self.entries[name];
            write_str(&mut payload, name);
            payload.push(entry.dtype_tag());
            match entry {
                Entry::F32(a) => {
                    write_dims(&mut payload, a.shape());
                    for v in a.iter() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::F64(a) => {
                    write_dims(&mut payload, a.shape());
                    for v in a.iter() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::I64(v) => {
                    write_dims(&mut payload, &[v.len()]);
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Entry::Bytes(v) => {
                    write_dims(&mut payload, &[v.len()]);
                    payload.extend_from_slice(v);
                }
            }
        }
        let digest = Sha256::digest(&payload);
        let mut out = Vec::with_capacity(4 + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 4 + 32 || &data[..4] != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let payload = &data[4..data.len() - 32];
        let stored = &data[data.len() - 32..];
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored {
            return Err(Error::Container("checksum mismatch".into()));
        }
        let mut cur = Cursor { data: payload, pos: 0 };
        let version = cur.read_str()?;
        let count = cur.read_u64()? as usize;
        let mut container = Container::new(&version);
        for _ in 0..count {
            let name = cur.read_str()?;
            let tag = cur.read_u8()?;
            let dims = cur.read_dims()?;
            let n: usize = dims.iter().product();
            let entry = match tag {
                0 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(f32::from_le_bytes(cur.read_bytes(4)?.try_into().unwrap()));
                    }
                    Entry::F32(ArrayD::from_shape_vec(IxDyn(&dims), v).unwrap())
                }
                1 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(f64::from_le_bytes(cur.read_bytes(8)?.try_into().unwrap()));
                    }
                    Entry::F64(ArrayD::from_shape_vec(IxDyn(&dims), v).unwrap())
                }
                2 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(i64::from_le_bytes(cur.read_bytes(8)?.try_into().unwrap()));
                    }
                    Entry::I64(v)
                }
                3 => Entry::Bytes(cur.read_bytes(n)?.to_vec()),
                t => return Err(Error::Container(format!("unknown dtype tag {t}"))),
            };
            container.put(&name, entry);
        }
        Ok(container)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Self::from_bytes(&data)
    }

    /// SHA-256 of the serialized container, hex-encoded.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn write_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for d in dims {
        write_u64(out, *d as u64);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Container("truncated".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.read_bytes(1)?[0])
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.read_bytes(8)?.try_into().unwrap()))
    }

    fn read_str(&mut self) -> Result<String> {
        let n = self.read_u64()? as usize;
        String::from_utf8(self.read_bytes(n)?.to_vec())
            .map_err(|_| Error::Container("invalid utf-8".into()))
    }

    fn read_dims(&mut self) -> Result<Vec<usize>> {
        let ndim = self.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.read_u64()? as usize);
        }
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> Container {
        let mut c = Container::new("1");
        c.put_f32("w", arr2(&[[1.0f32, 2.0], [3.0, 4.5]]).into_dyn());
        c.put_f64("mean", arr2(&[[0.25f64]]).into_dyn());
        c.put_i64("indices", vec![0, 3, 7]);
        c.put_str("meta/kind", "test");
        c
    }

    #[test]
    fn round_trip_preserves_entries_and_order() {
        let c = sample();
        let decoded = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(decoded.version(), "1");
        assert_eq!(decoded.names(), c.names());
        assert_eq!(decoded.f32("w").unwrap(), c.f32("w").unwrap());
        assert_eq!(decoded.f64("mean").unwrap(), c.f64("mean").unwrap());
        assert_eq!(decoded.i64("indices").unwrap(), &[0, 3, 7]);
        assert_eq!(decoded.str("meta/kind").unwrap(), "test");
    }

    #[test]
    fn reload_then_resave_is_byte_stable() {
        let bytes = sample().to_bytes();
        let reloaded = Container::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_blob_is_an_integrity_error() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        match Container::from_bytes(&bytes) {
            Err(Error::Container(msg)) => assert!(msg.contains("checksum")),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn missing_entry_reported_by_name() {
        let c = sample();
        let err = c.f32("nope").unwrap_err();
        assert!(format!("{err}").contains("nope"));
    }
}
