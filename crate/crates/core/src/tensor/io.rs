//! Tensor block serialization.
//!
//! A block is a text manifest followed by a little-endian row-major payload:
//!
//! ```text
//! tensors <n>
//! <name> <shape> <dtype> <byte_offset>     (n lines)
//! <payload bytes>
//! ```
//!
//! `shape` is comma-joined (`64,192`; `scalar` for zero dimensions), `dtype`
//! is `f32` or `f64`, and offsets are relative to the start of the payload.

use std::io::{BufRead, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

pub fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

pub fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split(',').map(|d| d.parse().ok()).collect()
}

pub fn encode(values: &[f64], dtype: DType, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

/// Writes a manifest and payload for `tensors`.
pub fn write_block<W: Write>(w: &mut W, tensors: &[(&str, &Tensor)], dtype: DType) -> std::io::Result<()> {
    let mut payload = Vec::new();
    let mut manifest = format!("tensors {}\n", tensors.len());
    for (name, t) in tensors {
        manifest.push_str(&format!(
            "{name} {} {} {}\n",
            format_shape(t.shape()),
            dtype.as_str(),
            payload.len()
        ));
        encode(t.data(), dtype, &mut payload);
    }
    w.write_all(manifest.as_bytes())?;
    w.write_all(&payload)
}

pub(crate) fn read_line<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if n == 0 {
        return Err(Error::corrupt(path, "unexpected end of file"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

/// Reads a block written by [`write_block`]. `path` is used for diagnostics only.
pub fn read_block<R: BufRead>(r: &mut R, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let header = read_line(r, path)?;
    let count: usize = header
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::corrupt(path, format!("bad block header `{header}`")))?;
    let mut entries = Vec::with_capacity(count);
    let mut end = 0usize;
    for _ in 0..count {
        let line = read_line(r, path)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = || Error::corrupt(path, format!("bad manifest line `{line}`"));
        if fields.len() != 4 {
            return Err(bad());
        }
        let shape = parse_shape(fields[1]).ok_or_else(bad)?;
        let dtype = DType::parse(fields[2]).ok_or_else(bad)?;
        let offset: usize = fields[3].parse().map_err(|_| bad())?;
        let size = shape.iter().product::<usize>() * dtype.size();
        end = end.max(offset + size);
        entries.push((fields[0].to_string(), shape, dtype, offset, size));
    }
    let mut payload = vec![0u8; end];
    r.read_exact(&mut payload)
        .map_err(|_| Error::corrupt(path, "truncated payload"))?;
    entries
        .into_iter()
        .map(|(name, shape, dtype, offset, size)| {
            let t = Tensor::new(shape, decode(&payload[offset..offset + size], dtype))?;
            Ok((name, t))
        })
        .collect()
}
