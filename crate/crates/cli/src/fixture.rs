//! Binary tensor fixtures.
//!
//! A framed tensor is an 8-byte header followed by extents and payload:
//!
//! ```text
//! 4C 41 50 53   magic "LAPS"
//! 01            version
//! 00 | 01       dtype (0 = f32, 1 = f64)
//! nn            ndim
//! 00            reserved
//! ndim × u64    extents, little-endian
//! payload       row-major values, little-endian
//! ```
//!
//! Named-tensor archives concatenate records of
//! `[u32 name length (LE), UTF-8 name, framed tensor]` with no outer header.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use laps_core::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"LAPS";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> FixtureError {
    FixtureError::Format(msg.into())
}

fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

/// Appends one framed tensor to `out`, stored at `dtype`.
pub fn encode_tensor(tensor: &Tensor, dtype: DType, out: &mut Vec<u8>) -> Result<(), FixtureError> {
    let ndim = u8::try_from(tensor.rank())
        .map_err(|_| format_err(format!("rank {} does not fit in a byte", tensor.rank())))?;
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype_code(dtype), ndim, 0]);
    for &extent in tensor.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FixtureError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_one(cur: &mut Cursor<'_>) -> Result<Tensor, FixtureError> {
    let header = cur.take(8)?;
    if header[..4] != MAGIC {
        return Err(format_err(format!("bad magic {:02X?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(format_err(format!("unsupported version {}", header[4])));
    }
    let dtype = match header[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(format_err(format!("unknown dtype code {other}"))),
    };
    if header[7] != 0 {
        return Err(format_err("reserved byte must be zero"));
    }
    let ndim = header[6] as usize;
    if ndim == 0 {
        return Err(format_err("ndim must be at least 1"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let extent = usize::try_from(raw).map_err(|_| format_err("extent overflows usize"))?;
        if extent == 0 {
            return Err(format_err("extents must be positive"));
        }
        shape.push(extent);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| format_err("element count overflows"))?;
    let payload = cur.take(
        count
            .checked_mul(dtype.width())
            .ok_or_else(|| format_err("payload size overflows"))?,
    )?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    let tensor = Tensor::new(shape, data).map_err(|e| format_err(e.to_string()))?;
    Ok(tensor.cast(dtype))
}

/// Decodes exactly one framed tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FixtureError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let tensor = decode_one(&mut cur)?;
    if !cur.done() {
        return Err(format_err(format!(
            "{} trailing bytes after tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(tensor)
}

/// Encodes a named-tensor archive.
pub fn encode_archive(tensors: &[(String, Tensor)], dtype: DType) -> Result<Vec<u8>, FixtureError> {
    let mut out = Vec::new();
    for (name, tensor) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| format_err("name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(tensor, dtype, &mut out)?;
    }
    Ok(out)
}

/// Decodes a named-tensor archive.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FixtureError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while !cur.done() {
        let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_string();
        out.push((name, decode_one(&mut cur)?));
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, FixtureError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FixtureError> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<(), FixtureError> {
    let mut bytes = Vec::new();
    encode_tensor(tensor, dtype, &mut bytes)?;
    write_bytes(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FixtureError> {
    decode_tensor(&read_bytes(path)?)
}

pub fn write_archive(
    path: &Path,
    tensors: &[(String, Tensor)],
    dtype: DType,
) -> Result<(), FixtureError> {
    write_bytes(path, &encode_archive(tensors, dtype)?)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>, FixtureError> {
    decode_archive(&read_bytes(path)?)
}
