//! Binary tensor container.
//!
//! ```text
//! "LISA" | version: u32 | rank: u32 | extents: u64 * rank | payload: f64 * prod(extents)
//! ```
//!
//! All integers and floats are little-endian; the payload is row-major.

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LISA";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what}: needed {n} bytes at {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected \"LISA\"".into(),
        });
    }
    let version = c.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let rank = c.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(64));
    let mut count: u64 = 1;
    for axis in 0..rank {
        let at = c.pos as u64;
        let e = c.u64("extent")?;
        count = count.checked_mul(e).ok_or_else(|| Error::Format {
            offset: at,
            reason: format!("extent {e} on axis {axis} overflows the element count"),
        })?;
        shape.push(usize::try_from(e).map_err(|_| Error::Format {
            offset: at,
            reason: format!("extent {e} does not fit in memory"),
        })?);
    }
    let payload_at = c.pos as u64;
    let need = count.checked_mul(8).filter(|&b| b <= (bytes.len() - c.pos) as u64).ok_or(Error::Format {
        offset: bytes.len() as u64,
        reason: format!("payload of {count} values starting at byte {payload_at} is truncated"),
    })?;
    let payload = c.take(need as usize, "payload")?;
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            reason: format!("{} trailing bytes after payload", bytes.len() - c.pos),
        });
    }
    let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::from_vec(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
