//! The `FTNS` tensor file.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `FTNS` |
//! | 1 | version, currently 1 |
//! | 1 | dtype: 0 = f32, 1 = f64, 2 = i32 |
//! | 1 | ndim |
//! | 4·ndim | dims as u32 |
//! | numel·size | row-major payload |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 4] = b"FTNS";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor as stored on disk, keeping its element type.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    F64(Tensor),
    I32 { dims: Vec<usize>, data: Vec<i32> },
}

impl StoredTensor {
    pub fn ints(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{} ints for dims {dims:?}", data.len())));
        }
        Ok(StoredTensor::I32 { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            StoredTensor::F32 { dims, .. } | StoredTensor::I32 { dims, .. } => dims,
            StoredTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32 { .. } => DType::F32,
            StoredTensor::F64(_) => DType::F64,
            StoredTensor::I32 { .. } => DType::I32,
        }
    }

    /// Floating payload widened to f64. Integer tensors are rejected.
    pub fn into_float(self) -> Result<Tensor> {
        match self {
            StoredTensor::F64(t) => Ok(t),
            StoredTensor::F32 { dims, data } => Tensor::new(dims, data.into_iter().map(f64::from).collect()),
            StoredTensor::I32 { .. } => Err(Error::contract("expected a float tensor, found i32")),
        }
    }

    pub fn as_ints(&self) -> Result<&[i32]> {
        match self {
            StoredTensor::I32 { data, .. } => Ok(data),
            other => Err(Error::contract(format!("expected an i32 tensor, found {:?}", other.dtype()))),
        }
    }
}

impl From<Tensor> for StoredTensor {
    fn from(t: Tensor) -> Self {
        StoredTensor::F64(t)
    }
}

pub fn encode(tensor: &StoredTensor) -> Result<Vec<u8>> {
    let dims = tensor.dims();
    if dims.len() > u8::MAX as usize {
        return Err(Error::shape(format!("{} dims exceed the format limit", dims.len())));
    }
    let numel: usize = dims.iter().product();
    let dtype = tensor.dtype();
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + numel * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match tensor {
        StoredTensor::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| format_err(at, format!("truncated {what}: need {n} bytes, have {}", bytes.len().saturating_sub(at))))
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(StoredTensor, usize)> {
    if take(bytes, 0, 4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected FTNS"));
    }
    let version = take(bytes, 4, 1, "version")?[0];
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let code = take(bytes, 5, 1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| format_err(5, format!("unknown dtype code {code}")))?;
    let ndim = take(bytes, 6, 1, "ndim")?[0] as usize;
    let mut at = 7;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = take(bytes, at, 4, "dims")?;
        dims.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
        at += 4;
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(7, "element count overflows"))?;
    let len = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(7, "payload size overflows"))?;
    let payload = take(bytes, at, len, "payload")?;
    let words = payload.chunks_exact(dtype.size());
    let tensor = match dtype {
        DType::F32 => StoredTensor::F32 {
            dims,
            data: words.map(|w| f32::from_le_bytes(w.try_into().unwrap())).collect(),
        },
        DType::I32 => StoredTensor::I32 {
            dims,
            data: words.map(|w| i32::from_le_bytes(w.try_into().unwrap())).collect(),
        },
        DType::F64 => {
            let data: Vec<f64> = words.map(|w| f64::from_le_bytes(w.try_into().unwrap())).collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(format_err(at + 8 * i, "non-finite f64 element"));
            }
            StoredTensor::F64(Tensor::new(dims, data)?)
        }
    };
    Ok((tensor, at + len))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode_exact(bytes: &[u8]) -> Result<StoredTensor> {
    let (t, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(format_err(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, reason } => Error::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

pub fn write_stored(path: impl AsRef<Path>, tensor: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensor)?).map_err(|e| Error::io(path, e))
}

pub fn read_stored(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_exact(&bytes).map_err(|e| with_path(path, e))
}

/// Writes `tensor` as f64.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    write_stored(path, &StoredTensor::F64(tensor.clone()))
}

/// Reads a float tensor of either width.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_stored(path)?.into_float()
}
