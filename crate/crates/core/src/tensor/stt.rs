//! STT tensor files.
//!
//! Layout (little-endian):
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 0..4         | magic `STT1`                    |
//! | 4..8         | zero padding                    |
//! | 8..12        | rank as `u32` (at most 8)       |
//! | 12..12+4r    | dimension sizes as `u32`        |
//! | then         | `f32` payload, row-major        |
//!
//! There is no alignment padding between the dimensions and the payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"STT1";
pub const MAX_RANK: usize = 8;

/// Byte size of the encoded form of a tensor with `shape`.
pub fn encoded_len(shape: &[usize]) -> usize {
    12 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(format_err(8, format!("rank {} exceeds {MAX_RANK}", t.rank())));
    }
    let mut buf = Vec::with_capacity(encoded_len(t.shape()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[0u8; 4]);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| format_err(buf.len() as u64, format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected \"STT1\"")));
    }
    let pad = cur.take(4, "padding")?;
    if pad != [0u8; 4] {
        return Err(format_err(4, "nonzero padding".into()));
    }
    let rank = cur.u32("rank")? as usize;
    if rank > MAX_RANK {
        return Err(format_err(8, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32("dimension")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(12, "element count overflows".into()))?;
    let payload_start = cur.pos as u64;
    let remaining = bytes.len() - cur.pos;
    if remaining != count * 4 {
        return Err(format_err(
            payload_start,
            format!("payload has {remaining} bytes, shape {shape:?} needs {}", count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in bytes[cur.pos..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(format_err(
                payload_start + 4 * i as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|source| io_err(path, source))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| io_err(path, source))?;
    decode(&bytes)
}

/// Reads only the shape from a file header.
pub fn read_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    Ok(read(path)?.shape().to_vec())
}

fn format_err(offset: u64, reason: String) -> TensorError {
    TensorError::Format { offset, reason }
}

fn io_err(path: &Path, source: std::io::Error) -> TensorError {
    TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(format_err(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
