//! GRID1: a flat container of named little-endian f32/f64 arrays.
//!
//! Layout: magic `GRD1`, version `u16`, record count `u32`; then per record
//! name length `u16`, UTF-8 name, dtype `u8` (1 = f32, 2 = f64), ndim `u8`,
//! `ndim` dims as `u32`, row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GRD1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl RecordData {
    pub fn shape(&self) -> &[usize] {
        match self {
            RecordData::F32(t) => t.shape(),
            RecordData::F64(t) => t.shape(),
        }
    }

    /// Widened copy of the payload.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            RecordData::F32(t) => t.cast(),
            RecordData::F64(t) => t.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

impl Record {
    pub fn f32(name: impl Into<String>, t: Tensor<f32>) -> Self {
        Self { name: name.into(), data: RecordData::F32(t) }
    }

    pub fn f64(name: impl Into<String>, t: Tensor<f64>) -> Self {
        Self { name: name.into(), data: RecordData::F64(t) }
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| Error::contract("too many records"))?.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("record name `{}` too long", r.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = r.data.shape();
        out.push(match r.data {
            RecordData::F32(_) => 1,
            RecordData::F64(_) => 2,
        });
        out.push(u8::try_from(shape.len()).map_err(|_| Error::contract("too many dimensions"))?);
        for &d in shape {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::contract("dimension too large"))?.to_le_bytes());
        }
        match &r.data {
            RecordData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            RecordData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(self.pos as u64, format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected GRD1"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u16("name length")? as usize;
        let name =
            std::str::from_utf8(r.take(len, "record name")?).map_err(|_| Error::parse(at + 2, "record name is not UTF-8"))?.to_string();
        let dtype_at = r.pos as u64;
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_at = r.pos as u64;
        let data = match dtype {
            1 => {
                let bytes = r.take(n * 4, "payload")?;
                let v = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                RecordData::F32(Tensor::from_parts_allow_nonfinite(shape, v).map_err(|e| Error::parse(payload_at, e.to_string()))?)
            }
            2 => {
                let bytes = r.take(n * 8, "payload")?;
                let v = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                RecordData::F64(Tensor::from_parts_allow_nonfinite(shape, v).map_err(|e| Error::parse(payload_at, e.to_string()))?)
            }
            other => return Err(Error::parse(dtype_at, format!("unknown dtype code {other}"))),
        };
        records.push(Record { name, data });
    }
    if r.pos != buf.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

/// Looks up a record by name.
pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a RecordData> {
    records.iter().find(|r| r.name == name).map(|r| &r.data).ok_or_else(|| Error::contract(format!("record `{name}` not found")))
}
