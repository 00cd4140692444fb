//! Binary tensor files and named-tensor archives.
//!
//! One record is `"BTNR"`, a version byte (1), a dtype byte (1 = f32,
//! 2 = i32), a rank byte, `rank` little-endian u32 dims, then the row-major
//! little-endian payload. An archive is a sequence of entries, each a
//! little-endian u32 name length, the UTF-8 name, and one record.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTNR";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_I32: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FileError {
    #[error("bad magic {0:?}, expected \"BTNR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("{0}")]
    Unrepresentable(String),
}

impl From<FileError> for Error {
    fn from(e: FileError) -> Self {
        Error::File(e)
    }
}

/// Integer tensor; only stored and loaded, never differentiated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<i32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("int tensor", &shape, &[data.len()]));
        }
        Ok(IntTensor { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    I32(IntTensor),
}

impl Record {
    pub fn shape(&self) -> &[usize] {
        match self {
            Record::F32(t) => t.shape(),
            Record::I32(t) => &t.shape,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            Record::F32(_) => "f32",
            Record::I32(_) => "i32",
        }
    }

    /// Equality of shapes and payload bits (so NaN payloads compare equal).
    pub fn bitwise_eq(&self, other: &Record) -> bool {
        match (self, other) {
            (Record::F32(a), Record::F32(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Record::I32(a), Record::I32(b)) => a == b,
            _ => false,
        }
    }
}

pub fn encode_record(rec: &Record, out: &mut Vec<u8>) -> Result<()> {
    let shape = rec.shape();
    if shape.len() > u8::MAX as usize {
        return Err(FileError::Unrepresentable(format!("rank {} exceeds 255", shape.len())).into());
    }
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match rec {
        Record::F32(_) => DTYPE_F32,
        Record::I32(_) => DTYPE_I32,
    });
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| FileError::Unrepresentable(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match rec {
        Record::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Record::I32(t) => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FileError> {
        let end = self.pos.checked_add(n).ok_or(FileError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(FileError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn record(&mut self) -> Result<Record, FileError> {
        let magic: [u8; 4] = self.take(4, "header")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(FileError::BadMagic(magic));
        }
        let head = self.take(3, "header")?;
        let (version, dtype, rank) = (head[0], head[1], head[2] as usize);
        if version != VERSION {
            return Err(FileError::BadVersion(version));
        }
        if dtype != DTYPE_F32 && dtype != DTYPE_I32 {
            return Err(FileError::BadDtype(dtype));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dimensions")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(FileError::Truncated("payload"))?;
        let bytes = self.take(n.checked_mul(4).ok_or(FileError::Truncated("payload"))?, "payload")?;
        let words = bytes.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
        Ok(if dtype == DTYPE_F32 {
            let data = words.map(f32::from_le_bytes).collect();
            let t = Tensor::new(shape, data).map_err(|e| FileError::Unrepresentable(e.to_string()))?;
            Record::F32(t)
        } else {
            let data = words.map(i32::from_le_bytes).collect();
            Record::I32(IntTensor { shape, data })
        })
    }
}

/// Decodes exactly one record occupying the whole buffer.
pub fn decode_record(bytes: &[u8]) -> Result<Record> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let rec = r.record()?;
    if !r.done() {
        return Err(Error::Format(format!("{} trailing bytes after record", bytes.len() - r.pos)));
    }
    Ok(rec)
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Record)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rec: Record) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(FileError::DuplicateName(name).into());
        }
        self.entries.push((name, rec));
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        self.push(name, Record::F32(t))
    }

    pub fn push_i32(&mut self, name: impl Into<String>, t: IntTensor) -> Result<()> {
        self.push(name, Record::I32(t))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Record::F32(t)) => Ok(t),
            Some(r) => Err(FileError::WrongDtype {
                name: name.into(),
                found: r.dtype_name(),
                expected: "f32",
            }
            .into()),
            None => Err(FileError::Missing(name.into()).into()),
        }
    }

    pub fn i32(&self, name: &str) -> Result<&IntTensor> {
        match self.get(name) {
            Some(Record::I32(t)) => Ok(t),
            Some(r) => Err(FileError::WrongDtype {
                name: name.into(),
                found: r.dtype_name(),
                expected: "i32",
            }
            .into()),
            None => Err(FileError::Missing(name.into()).into()),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (name, rec) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(FileError::DuplicateName(name.clone()).into());
            }
            let len = u32::try_from(name.len()).map_err(|_| FileError::Unrepresentable("name too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_record(rec, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let mut archive = Archive::new();
        while !r.done() {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| FileError::BadName)?;
            let rec = r.record()?;
            archive.push(name, rec)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Archive::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_record(&Record::F32(t), &mut buf).unwrap();
        let mut expect = b"BTNR".to_vec();
        expect.extend_from_slice(&[1, 1, 1, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);

        let mut buf = Vec::new();
        encode_record(&Record::I32(IntTensor::new(vec![1, 1], vec![-1]).unwrap()), &mut buf).unwrap();
        assert_eq!(buf, [b'B', b'T', b'N', b'R', 1, 2, 2, 1, 0, 0, 0, 1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn scalar_record_round_trips() {
        let rec = Record::F32(Tensor::new(vec![], vec![3.5]).unwrap());
        let mut buf = Vec::new();
        encode_record(&rec, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 3 + 4);
        assert!(decode_record(&buf).unwrap().bitwise_eq(&rec));
    }

    #[test]
    fn header_errors() {
        let mut buf = Vec::new();
        encode_record(&Record::F32(Tensor::zeros(vec![3])), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_record(&bad), Err(Error::File(FileError::BadMagic(_)))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(decode_record(&bad), Err(Error::File(FileError::BadVersion(2)))));
        let mut bad = buf.clone();
        bad[5] = 9;
        assert!(matches!(decode_record(&bad), Err(Error::File(FileError::BadDtype(9)))));
        assert!(matches!(
            decode_record(&buf[..buf.len() - 1]),
            Err(Error::File(FileError::Truncated("payload")))
        ));
    }

    #[test]
    fn archive_order_and_lookup() {
        let mut a = Archive::new();
        a.push_f32("b", Tensor::ones(vec![2, 2])).unwrap();
        a.push_i32("a", IntTensor::new(vec![3], vec![1, 2, 3]).unwrap()).unwrap();
        a.push_i32("c", IntTensor::new(vec![0], vec![]).unwrap()).unwrap();
        assert!(a.push_f32("a", Tensor::zeros(vec![1])).is_err());
        let back = Archive::decode(&a.encode().unwrap()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(back.i32("a").unwrap().data, vec![1, 2, 3]);
        assert!(matches!(back.f32("a"), Err(Error::File(FileError::WrongDtype { .. }))));
        assert!(matches!(back.f32("zz"), Err(Error::File(FileError::Missing(_)))));
    }

    #[test]
    fn duplicate_names_rejected_on_read() {
        let mut a = Archive::new();
        a.push_f32("x", Tensor::zeros(vec![1])).unwrap();
        let mut bytes = a.encode().unwrap();
        let again = bytes.clone();
        bytes.extend_from_slice(&again);
        assert!(matches!(
            Archive::decode(&bytes),
            Err(Error::File(FileError::DuplicateName(n))) if n == "x"
        ));
    }
}
