//! DITQ binary tensor files.
//!
//! Layout (little-endian): `b"DITQ"`, `u32` version, `u8` dtype, `u8` ndim,
//! `ndim × u64` dims, raw payload. Quantized payloads (dtype 2 and 3) are
//! followed by a `u64` scale count, that many `f32` scales, and one `u8`
//! channel-axis code (0 = input, 1 = output).

use std::fs;
use std::path::Path;

use half::f16;

use super::{ChannelAxis, HalfMatrix, Matrix};
use crate::error::{Error, Result};
use crate::quant::{BitWidth, QuantizedTensor};

pub const MAGIC: [u8; 4] = *b"DITQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F16 = 1,
    Int8 = 2,
    Int4Packed = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            2 => Ok(DType::Int8),
            3 => Ok(DType::Int4Packed),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    /// Payload bytes for `elements` values of this dtype.
    pub fn payload_len(self, elements: u64) -> u64 {
        match self {
            DType::F32 => elements * 4,
            DType::F16 => elements * 2,
            DType::Int8 => elements,
            DType::Int4Packed => elements.div_ceil(2),
        }
    }
}

/// Any value that can live in a DITQ file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    F32(Matrix),
    F16(HalfMatrix),
    Quantized(QuantizedTensor),
}

impl TensorFile {
    pub fn dtype(&self) -> DType {
        match self {
            TensorFile::F32(_) => DType::F32,
            TensorFile::F16(_) => DType::F16,
            TensorFile::Quantized(q) => match q.bits() {
                BitWidth::W8 => DType::Int8,
                BitWidth::W4 => DType::Int4Packed,
            },
        }
    }

    pub fn into_f32(self) -> Result<Matrix> {
        match self {
            TensorFile::F32(m) => Ok(m),
            other => Err(Error::Format(format!("expected fp32 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn into_f16(self) -> Result<HalfMatrix> {
        match self {
            TensorFile::F16(m) => Ok(m),
            other => Err(Error::Format(format!("expected fp16 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn into_quantized(self) -> Result<QuantizedTensor> {
        match self {
            TensorFile::Quantized(q) => Ok(q),
            other => Err(Error::Format(format!(
                "expected quantized tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = match self {
            TensorFile::F32(m) => m.shape(),
            TensorFile::F16(h) => (h.rows(), h.cols()),
            TensorFile::Quantized(q) => (q.rows(), q.cols()),
        };
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(2);
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        match self {
            TensorFile::F32(m) => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorFile::F16(h) => h.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorFile::Quantized(q) => {
                out.extend_from_slice(q.payload());
                out.extend_from_slice(&(q.scales().len() as u64).to_le_bytes());
                q.scales().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                out.push(q.axis().code());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(cur.take(1)?[0])?;
        let ndim = cur.take(1)?[0];
        let dims: Vec<u64> = (0..ndim).map(|_| cur.u64()).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Format(format!("unsupported ndim {ndim}"))),
        };
        let elements = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let payload = cur.take_payload(dtype.payload_len(elements))?;
        let (rows, cols, elements) = (rows as usize, cols as usize, elements as usize);

        let value = match dtype {
            DType::F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                TensorFile::F32(Matrix::new(rows, cols, data)?)
            }
            DType::F16 => {
                let data = payload
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")))
                    .collect();
                TensorFile::F16(HalfMatrix::new(rows, cols, data)?)
            }
            DType::Int8 | DType::Int4Packed => {
                let count = cur.u64()?;
                let scale_bytes = cur.take_payload(count.saturating_mul(4))?;
                let scales = scale_bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let axis = ChannelAxis::from_code(cur.take(1)?[0])
                    .ok_or_else(|| Error::Format("unknown channel axis code".into()))?;
                let bits = if dtype == DType::Int8 { BitWidth::W8 } else { BitWidth::W4 };
                debug_assert_eq!(payload.len() as u64, dtype.payload_len(elements as u64));
                TensorFile::Quantized(QuantizedTensor::from_raw(
                    rows,
                    cols,
                    bits,
                    axis,
                    payload.to_vec(),
                    scales,
                )?)
            }
        };
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(value)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated header at byte {} (need {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_payload(&mut self, n: u64) -> Result<&'a [u8]> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if remaining < n {
            return Err(Error::PayloadLength {
                expected: n,
                actual: remaining,
            });
        }
        self.take(n as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_tensor(value: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, value.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}
