//! The `PCLT` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PCLT"
//! u32     version (1)
//! u32     tensor count
//! repeat:
//!   u16   name length in bytes
//!   [u8]  UTF-8 name
//!   u8    rank
//!   u64   dims[rank]
//!   f32   values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PclError, Result};
use crate::tensor::{ParameterGroup, Tensor};

pub const MAGIC: &[u8; 4] = b"PCLT";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| PclError::Contract(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| PclError::Contract(format!("rank too large for {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PclError::Load(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(PclError::Load("bad magic, not a PCLT file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(PclError::Load(format!("unsupported PCLT version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| PclError::Load("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = c.take(numel * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| PclError::Load(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(PclError::Load(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| PclError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| PclError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| PclError::io(path, e))?;
    decode(&bytes)
}

pub fn save_group(path: &Path, group: &ParameterGroup) -> Result<()> {
    save(path, group.iter().map(|(n, t)| (n.as_str(), t)))
}
