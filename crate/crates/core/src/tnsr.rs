//! Named-tensor container file, the on-disk format for checkpoints,
//! simulated readings, and reconstruction outputs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "TNSR"
//! version 1 byte   currently 1
//! count   u32      number of tensors
//! then per tensor, in file order:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    1 byte   0 = f32, 1 = f64
//!   rank     u32
//!   dims     rank x u64
//!   data     product(dims) elements, raw little-endian
//! ```
//!
//! Writing and re-reading preserves element bit patterns exactly, which is
//! what makes checkpoint round-trips byte-reproducible.

use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;
/// Refuse to allocate more than this many elements for a single tensor when
/// reading; anything larger is a corrupt or hostile file, not a checkpoint.
const MAX_ELEMS: u64 = 1 << 32;
const MAX_RANK: u32 = 16;
const MAX_NAME: u32 = 1 << 16;

#[derive(Error, Debug)]
pub enum TnsrError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("malformed tensor file: {0}")]
    Malformed(&'static str),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?} is {got:?}, expected {want:?}")]
    WrongDtype { name: String, got: Dtype, want: Dtype },
}

/// Element type of a stored tensor. The discriminants are the on-disk codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn elem_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, TnsrError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(TnsrError::BadDtype(c)),
        }
    }
}

/// A tensor payload in either supported precision.
#[derive(Clone, Debug)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(a) => a.len(),
            TensorData::F64(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An ordered collection of named tensors; the unit a `.tnsr` file stores.
///
/// Order is preserved exactly as pushed, so files written from the same
/// sequence of tensors are byte-identical.
#[derive(Clone, Debug, Default)]
pub struct TensorFile {
    entries: Vec<(String, TensorData)>,
    index: HashMap<String, usize>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.entries.iter().map(|(n, d)| (n.as_str(), d))
    }

    pub fn push(&mut self, name: impl Into<String>, data: TensorData) -> Result<(), TnsrError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TnsrError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&TensorData, TnsrError> {
        self.get(name).ok_or_else(|| TnsrError::Missing(name.to_string()))
    }

    pub fn require_f32(&self, name: &str) -> Result<&ArrayD<f32>, TnsrError> {
        match self.require(name)? {
            TensorData::F32(a) => Ok(a),
            other => Err(TnsrError::WrongDtype {
                name: name.to_string(),
                got: other.dtype(),
                want: Dtype::F32,
            }),
        }
    }

    pub fn require_f64(&self, name: &str) -> Result<&ArrayD<f64>, TnsrError> {
        match self.require(name)? {
            TensorData::F64(a) => Ok(a),
            other => Err(TnsrError::WrongDtype {
                name: name.to_string(),
                got: other.dtype(),
                want: Dtype::F64,
            }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TnsrError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TnsrError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TnsrError> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, data) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[data.dtype() as u8])?;
            w.write_all(&(data.shape().len() as u32).to_le_bytes())?;
            for &d in data.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match data {
                TensorData::F32(a) => {
                    let owned;
                    let slice = match a.as_slice() {
                        Some(s) => s,
                        None => {
                            owned = a.as_standard_layout().to_owned();
                            owned.as_slice().expect("standard layout is contiguous")
                        }
                    };
                    let mut buf = Vec::with_capacity(slice.len() * 4);
                    for v in slice {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
                TensorData::F64(a) => {
                    let owned;
                    let slice = match a.as_slice() {
                        Some(s) => s,
                        None => {
                            owned = a.as_standard_layout().to_owned();
                            owned.as_slice().expect("standard layout is contiguous")
                        }
                    };
                    let mut buf = Vec::with_capacity(slice.len() * 8);
                    for v in slice {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TnsrError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TnsrError::BadMagic);
        }
        let version = read_u8(r)?;
        if version != VERSION {
            return Err(TnsrError::BadVersion(version));
        }
        let count = read_u32(r)?;
        let mut out = TensorFile::new();
        for _ in 0..count {
            let name_len = read_u32(r)?;
            if name_len > MAX_NAME {
                return Err(TnsrError::Malformed("tensor name too long"));
            }
            let mut name_buf = vec![0u8; name_len as usize];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|_| TnsrError::BadName)?;
            let dtype = Dtype::from_code(read_u8(r)?)?;
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(TnsrError::Malformed("tensor rank too large"));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            let mut elems: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(r)?;
                elems = elems
                    .checked_mul(d)
                    .ok_or(TnsrError::Malformed("tensor size overflows"))?;
                if elems > MAX_ELEMS {
                    return Err(TnsrError::Malformed("tensor too large"));
                }
                dims.push(d as usize);
            }
            let n = elems as usize;
            let data = match dtype {
                Dtype::F32 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf)?;
                    let v: Vec<f32> = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    TensorData::F32(
                        ArrayD::from_shape_vec(IxDyn(&dims), v)
                            .map_err(|_| TnsrError::Malformed("shape/data mismatch"))?,
                    )
                }
                Dtype::F64 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf)?;
                    let v: Vec<f64> = buf
                        .chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect();
                    TensorData::F64(
                        ArrayD::from_shape_vec(IxDyn(&dims), v)
                            .map_err(|_| TnsrError::Malformed("shape/data mismatch"))?,
                    )
                }
            };
            out.push(name, data)?;
        }
        Ok(out)
    }
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, TnsrError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TnsrError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TnsrError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
