//! Tagged binary container shared by datasets and checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE length of a UTF-8 JSON header, the header,
//! the raw little-endian arrays back to back, then a `u32` LE CRC32 of every
//! preceding byte. The header holds caller metadata under `meta` and an array
//! directory (name, dtype, shape, byte offset relative to the data section).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MAGIC_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated container: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("array `{name}`: expected {expected}, found {found}")]
    ArrayType {
        name: String,
        expected: &'static str,
        found: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDType {
    F32,
    F64,
    U64,
}

impl ArrayDType {
    fn size(self) -> usize {
        match self {
            ArrayDType::F32 => 4,
            ArrayDType::F64 | ArrayDType::U64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ArrayDType::F32 => "f32",
            ArrayDType::F64 => "f64",
            ArrayDType::U64 => "u64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: ArrayDType,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ArrayEntry {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Typed payload of one array.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn dtype(&self) -> ArrayDType {
        match self {
            ArrayData::F32(_) => ArrayDType::F32,
            ArrayData::F64(_) => ArrayDType::F64,
            ArrayData::U64(_) => ArrayDType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: ArrayDType, bytes: &[u8]) -> Self {
        match dtype {
            ArrayDType::F32 => ArrayData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            ArrayDType::F64 => ArrayData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            ArrayDType::U64 => ArrayData::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }
}

/// An in-memory container: metadata plus named arrays in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; MAGIC_LEN],
    pub meta: Value,
    arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Container {
    pub fn new(magic: [u8; MAGIC_LEN], meta: Value) -> Self {
        Container {
            magic,
            meta,
            arrays: Vec::new(),
        }
    }

    /// Appends an array; the element count must match `shape`.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array shape does not match its data");
        self.arrays.push((name.into(), shape, data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &ArrayData), ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d))
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64]), ContainerError> {
        match self.get(name)? {
            (s, ArrayData::F64(v)) => Ok((s, v)),
            (_, d) => Err(type_error(name, "f64", d)),
        }
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32]), ContainerError> {
        match self.get(name)? {
            (s, ArrayData::F32(v)) => Ok((s, v)),
            (_, d) => Err(type_error(name, "f32", d)),
        }
    }

    pub fn u64(&self, name: &str) -> Result<(&[usize], &[u64]), ContainerError> {
        match self.get(name)? {
            (s, ArrayData::U64(v)) => Ok((s, v)),
            (_, d) => Err(type_error(name, "u64", d)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, shape, data) in &self.arrays {
            let e = ArrayEntry {
                name: name.clone(),
                dtype: data.dtype(),
                shape: shape.clone(),
                offset,
            };
            offset += e.byte_len();
            entries.push(e);
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })
        .expect("container header is always serializable");
        let mut out = Vec::with_capacity(MAGIC_LEN + 4 + header.len() + offset + 4);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.arrays {
            data.write_le(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses `bytes`. A wrong magic is reported first, then a length short
    /// of what the directory promises, then a checksum mismatch.
    pub fn from_bytes(bytes: &[u8], magic: &[u8; MAGIC_LEN]) -> Result<Self, ContainerError> {
        need(bytes, MAGIC_LEN)?;
        if &bytes[..MAGIC_LEN] != magic {
            return Err(ContainerError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..MAGIC_LEN]).into_owned(),
            });
        }
        need(bytes, MAGIC_LEN + 4)?;
        let header_len = u32::from_le_bytes(bytes[MAGIC_LEN..MAGIC_LEN + 4].try_into().unwrap()) as usize;
        let data_start = MAGIC_LEN + 4 + header_len;
        need(bytes, data_start + 4)?;
        let header: Option<Header> = serde_json::from_slice(&bytes[MAGIC_LEN + 4..data_start]).ok();
        if let Some(h) = &header {
            let data_len = h.arrays.iter().map(|e| e.offset + e.byte_len()).max().unwrap_or(0);
            need(bytes, data_start + data_len + 4)?;
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ContainerError::Checksum { stored, computed });
        }
        let header = header.ok_or_else(|| ContainerError::Header("header is not a valid directory".into()))?;
        let data = &body[data_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let payload = ArrayData::read_le(e.dtype, &data[e.offset..e.offset + e.byte_len()]);
            arrays.push((e.name, e.shape, payload));
        }
        Ok(Container {
            magic: *magic,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &[u8; MAGIC_LEN]) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?, magic)
    }
}

fn need(bytes: &[u8], needed: usize) -> Result<(), ContainerError> {
    if bytes.len() < needed {
        Err(ContainerError::Truncated {
            needed,
            have: bytes.len(),
        })
    } else {
        Ok(())
    }
}

fn type_error(name: &str, expected: &'static str, found: &ArrayData) -> ContainerError {
    ContainerError::ArrayType {
        name: name.to_string(),
        expected,
        found: found.dtype().name().to_string(),
    }
}
