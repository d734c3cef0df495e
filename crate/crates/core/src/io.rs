//! Binary tensor (`CDFT`) and checkpoint (`CDFC`) files.
//!
//! Tensor record, all integers little-endian:
//!
//! | bytes      | content                                          |
//! |------------|--------------------------------------------------|
//! | 4          | magic `CDFT`                                     |
//! | 1          | version, `0x01`                                  |
//! | 1          | dtype: `0x01` f32, `0x02` f64, `0x03` u32 labels |
//! | 1          | ndim: 4 for tensors, 3 for label maps            |
//! | 4 × ndim   | extents as u32                                   |
//! | rest       | row-major payload                                |
//!
//! Checkpoint: magic `CDFC`, version `0x01`, u32 entry count, then per entry a
//! u32 name length, the UTF-8 name and an embedded tensor record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, LabelMap, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CDFT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDFC";
pub const FORMAT_VERSION: u8 = 0x01;

/// A decoded tensor record of any dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Labels(LabelMap),
}

impl Record {
    pub fn dtype(&self) -> DType {
        match self {
            Record::F32(_) => DType::F32,
            Record::F64(_) => DType::F64,
            Record::Labels(_) => DType::U32,
        }
    }

    /// Extracts a real tensor of element type `T`.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        let found = self.dtype();
        let any: Box<dyn std::any::Any> = match self {
            Record::F32(t) => Box::new(t),
            Record::F64(t) => Box::new(t),
            Record::Labels(_) => {
                return Err(Error::Format(
                    "expected a real tensor, found a label map".into(),
                ))
            }
        };
        any.downcast::<Tensor<T>>()
            .map(|b| *b)
            .map_err(|_| Error::Format(format!("expected dtype {:?}, found {found:?}", T::DTYPE)))
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            Record::Labels(l) => Ok(l),
            other => Err(Error::Format(format!(
                "expected a label map, found dtype {:?}",
                other.dtype()
            ))),
        }
    }
}

fn header(out: &mut Vec<u8>, dtype: DType, extents: &[usize]) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dtype.code());
    out.push(extents.len() as u8);
    for &e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    header(out, T::DTYPE, &t.dims());
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_labels(l: &LabelMap, out: &mut Vec<u8>) {
    header(out, DType::U32, &l.dims());
    out.reserve(l.len() * 4);
    for &v in l.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Forward-only reader over a byte buffer that reports truncation precisely.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Length(format!(
                "{what}: need {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_record(cur: &mut Cursor<'_>) -> Result<Record> {
    let magic = cur.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected \"CDFT\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "unsupported tensor format version 0x{version:02x}"
        )));
    }
    let code = cur.u8("dtype")?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Version(format!("unknown dtype byte 0x{code:02x}")))?;
    let ndim = cur.u8("ndim")? as usize;
    let expected_ndim = if dtype == DType::U32 { 3 } else { 4 };
    if ndim != expected_ndim {
        return Err(Error::Format(format!(
            "dtype {dtype:?} requires ndim {expected_ndim}, header says {ndim}"
        )));
    }
    let mut extents = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        extents.push(cur.u32("extent")? as usize);
    }
    if extents.contains(&0) {
        return Err(Error::Format(format!("zero extent in {extents:?}")));
    }
    let bytes = extents
        .iter()
        .try_fold(dtype.size(), |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Length(format!("extents {extents:?} overflow the address space")))?;
    let payload = cur.take(bytes, "payload")?;
    Ok(match dtype {
        DType::F32 => Record::F32(Tensor::from_vec(
            extents.try_into().unwrap(),
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => Record::F64(Tensor::from_vec(
            extents.try_into().unwrap(),
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
        DType::U32 => Record::Labels(LabelMap::from_vec(
            extents.try_into().unwrap(),
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
    })
}

/// Decodes a single standalone record; trailing bytes are a format error.
pub fn decode(bytes: &[u8]) -> Result<Record> {
    let mut cur = Cursor { bytes, pos: 0 };
    let rec = decode_record(&mut cur)?;
    if !cur.at_end() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(rec)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    write_bytes(path.as_ref(), &buf)
}

pub fn write_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_labels(l, &mut buf);
    write_bytes(path.as_ref(), &buf)
}

pub fn read_record(path: impl AsRef<Path>) -> Result<Record> {
    decode(&read_bytes(path.as_ref())?)
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_record(path)?.into_tensor()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_record(path)?.into_labels()
}

pub fn encode_checkpoint<T: Scalar>(entries: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Record)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected \"CDFC\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u8("checkpoint version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "unsupported checkpoint version 0x{version:02x}"
        )));
    }
    let count = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| Error::Format(format!("checkpoint name is not UTF-8: {e}")))?
            .to_owned();
        let rec = decode_record(&mut cur)?;
        entries.push((name, rec));
    }
    if !cur.at_end() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last checkpoint entry",
            bytes.len() - cur.pos
        )));
    }
    Ok(entries)
}

pub fn write_checkpoint<T: Scalar>(
    entries: &[(String, &Tensor<T>)],
    path: impl AsRef<Path>,
) -> Result<()> {
    write_bytes(path.as_ref(), &encode_checkpoint(entries))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Record)>> {
    decode_checkpoint(&read_bytes(path.as_ref())?)
}
