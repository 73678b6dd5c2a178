//! Named parameter storage and the HDBW weight file.
//!
//! Layout (little-endian): `"HDBW"`, `u32` version, `u64` header length,
//! a UTF-8 header with one `name f32 d0,d1,...` line per tensor, then the raw
//! `f32` payloads in header order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HDBW";
const VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; names must be unique and contain no whitespace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid parameter name {name:?}")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{name} f32 {}\n", dims.join(",")));
        }
        let payload: usize = self.tensors.values().map(|t| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u64::<LittleEndian>(header.len() as u64).unwrap();
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::ShapeHeaderMismatch("file shorter than magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let short = |_| Error::ShapeHeaderMismatch("truncated preamble".into());
        let version = cur.read_u32::<LittleEndian>().map_err(short)?;
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let header_len = cur.read_u64::<LittleEndian>().map_err(short)?;
        let start = cur.position() as usize;
        let rest = bytes.len() - start;
        if header_len > rest as u64 {
            return Err(Error::ShapeHeaderMismatch(format!(
                "header length {header_len} exceeds remaining {rest} bytes"
            )));
        }
        let header_end = start + header_len as usize;
        let header = std::str::from_utf8(&bytes[start..header_end])
            .map_err(|e| Error::ShapeHeaderMismatch(format!("header is not UTF-8: {e}")))?;

        let mut entries = Vec::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let mut parts = line.split(' ');
            let (Some(name), Some(dtype), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::ShapeHeaderMismatch(format!("bad header line {line:?}")));
            };
            if dtype != "f32" {
                return Err(Error::ShapeHeaderMismatch(format!("unsupported dtype {dtype} for {name}")));
            }
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::ShapeHeaderMismatch(format!("bad shape for {name}: {e}")))?
            };
            entries.push((name.to_string(), shape));
        }

        let expected: u64 = entries
            .iter()
            .map(|(_, s)| s.iter().map(|&d| d as u64).product::<u64>() * 4)
            .sum();
        let payload = &bytes[header_end..];
        if payload.len() as u64 != expected {
            return Err(Error::ShapeHeaderMismatch(format!(
                "header declares {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        let mut cur = Cursor::new(payload);
        let mut ws = WeightStore::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            cur.read_f32_into::<LittleEndian>(&mut data)?;
            ws.insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::ShapeHeaderMismatch(e.to_string()))?;
        }
        Ok(ws)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }
}
