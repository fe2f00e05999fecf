//! On-disk tensor formats. All integers are little-endian.
//!
//! MXT (version 1):
//!
//! ```text
//! "MXT1" | version u16 | element_fmt u8 | rounding u8 | block_size u16 | axis u8 | rank u8
//!        | dims u32 × rank | scales u8 × blocks | elements u8 × (blocks · block_size)
//! ```
//!
//! Element codes take one byte each with the low bits significant; padding
//! lanes of partial blocks are stored.
//!
//! F32 (version 1):
//!
//! ```text
//! "F32T" | version u16 | rank u8 | dims u32 × rank | f32 × product(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::block::QuantConfig;
use crate::element::{ElementFormat, RoundingMode, ScaleE8M0};
use crate::tensor::{check_shape, AxisLayout, Fp32Tensor, MxTensor, MAX_RANK};

pub const MXT_MAGIC: &[u8; 4] = b"MXT1";
pub const F32_MAGIC: &[u8; 4] = b"F32T";
pub const MXT_VERSION: u16 = 1;
pub const F32_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {version} (field `version`)")]
    UnsupportedVersion { version: u16 },

    #[error("corrupt length in field `{field}`: expected {expected} bytes, found {found}")]
    CorruptLength {
        field: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("invalid value {value} in field `{field}`")]
    InvalidField { field: &'static str, value: u64 },
}

impl FileError {
    /// Whether the error comes from the file system rather than the content.
    pub fn is_io(&self) -> bool {
        matches!(self, FileError::Io(_))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FileError> {
        if self.remaining() < n {
            return Err(FileError::CorruptLength {
                field,
                expected: n as u64,
                found: self.remaining() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, FileError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, FileError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FileError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FileError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn dims(&mut self, rank: usize) -> Result<Vec<usize>, FileError> {
        (0..rank).map(|_| self.u32("dims").map(|d| d as usize)).collect()
    }

    fn finish(&self) -> Result<(), FileError> {
        if self.remaining() != 0 {
            return Err(FileError::CorruptLength {
                field: "trailing",
                expected: 0,
                found: self.remaining() as u64,
            });
        }
        Ok(())
    }
}

fn checked_product(dims: &[usize], field: &'static str) -> Result<usize, FileError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(FileError::InvalidField {
            field,
            value: u64::MAX,
        })
}

pub fn encode_mxt(mt: &MxTensor) -> Vec<u8> {
    let cfg = mt.cfg();
    let mut out = Vec::with_capacity(16 + 4 * mt.shape().len() + mt.num_blocks() + mt.codes().len());
    out.extend_from_slice(MXT_MAGIC);
    out.extend_from_slice(&MXT_VERSION.to_le_bytes());
    out.push(cfg.element_fmt.id());
    out.push(cfg.rounding.id());
    out.extend_from_slice(&(cfg.block_size as u16).to_le_bytes());
    out.push(mt.axis() as u8);
    out.push(mt.shape().len() as u8);
    for &d in mt.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(mt.scales().iter().map(|s| s.code));
    out.extend_from_slice(mt.codes());
    out
}

pub fn decode_mxt(bytes: &[u8]) -> Result<MxTensor, FileError> {
    let mut r = Reader::new(bytes);
    r.magic(MXT_MAGIC)?;
    let version = r.u16("version")?;
    if version != MXT_VERSION {
        return Err(FileError::UnsupportedVersion { version });
    }
    let fmt_id = r.u8("element_fmt")?;
    let fmt = ElementFormat::from_id(fmt_id).ok_or(FileError::InvalidField {
        field: "element_fmt",
        value: fmt_id as u64,
    })?;
    let rounding_id = r.u8("rounding")?;
    let rounding = RoundingMode::from_id(rounding_id).ok_or(FileError::InvalidField {
        field: "rounding",
        value: rounding_id as u64,
    })?;
    let block_size = r.u16("block_size")? as usize;
    if block_size == 0 {
        return Err(FileError::InvalidField {
            field: "block_size",
            value: 0,
        });
    }
    let axis = r.u8("axis")? as usize;
    let rank = r.u8("rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(FileError::InvalidField {
            field: "rank",
            value: rank as u64,
        });
    }
    let shape = r.dims(rank)?;
    if axis >= rank {
        return Err(FileError::InvalidField {
            field: "axis",
            value: axis as u64,
        });
    }
    if let Some(&d) = shape.iter().find(|&&d| d == 0) {
        return Err(FileError::InvalidField {
            field: "dims",
            value: d as u64,
        });
    }
    check_shape(&shape, axis).map_err(|_| FileError::InvalidField {
        field: "dims",
        value: 0,
    })?;
    checked_product(&shape, "dims")?;

    let layout = AxisLayout::new(&shape, axis, block_size);
    let blocks = layout.num_blocks();
    let lanes = blocks.checked_mul(block_size).ok_or(FileError::InvalidField {
        field: "dims",
        value: u64::MAX,
    })?;
    let scales: Vec<ScaleE8M0> = r
        .take(blocks, "scales")?
        .iter()
        .map(|&c| ScaleE8M0::from_code(c))
        .collect();
    let codes = r.take(lanes, "elements")?.to_vec();
    r.finish()?;

    let mask = fmt.code_mask();
    if let Some(&bad) = codes.iter().find(|&&c| c & !mask != 0) {
        return Err(FileError::InvalidField {
            field: "elements",
            value: bad as u64,
        });
    }
    let cfg = QuantConfig::new(fmt)
        .with_block_size(block_size)
        .with_rounding(rounding);
    MxTensor::from_parts(shape, axis, cfg, scales, codes).map_err(|_| FileError::InvalidField {
        field: "elements",
        value: lanes as u64,
    })
}

pub fn encode_f32(t: &Fp32Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(F32_MAGIC);
    out.extend_from_slice(&F32_VERSION.to_le_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Rank 0 and zero-sized dimensions are accepted here; callers decide
/// whether such tensors are usable.
pub fn decode_f32(bytes: &[u8]) -> Result<Fp32Tensor, FileError> {
    let mut r = Reader::new(bytes);
    r.magic(F32_MAGIC)?;
    let version = r.u16("version")?;
    if version != F32_VERSION {
        return Err(FileError::UnsupportedVersion { version });
    }
    let rank = r.u8("rank")? as usize;
    if rank > MAX_RANK {
        return Err(FileError::InvalidField {
            field: "rank",
            value: rank as u64,
        });
    }
    let shape = r.dims(rank)?;
    let count = checked_product(&shape, "dims")?;
    let bytes_needed = count.checked_mul(4).ok_or(FileError::InvalidField {
        field: "dims",
        value: u64::MAX,
    })?;
    let payload = r.take(bytes_needed, "payload")?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Fp32Tensor::new(shape, data).expect("payload length checked"))
}

pub fn write_mxt(path: impl AsRef<Path>, mt: &MxTensor) -> Result<(), FileError> {
    Ok(fs::write(path, encode_mxt(mt))?)
}

pub fn read_mxt(path: impl AsRef<Path>) -> Result<MxTensor, FileError> {
    decode_mxt(&fs::read(path)?)
}

pub fn write_f32(path: impl AsRef<Path>, t: &Fp32Tensor) -> Result<(), FileError> {
    Ok(fs::write(path, encode_f32(t))?)
}

pub fn read_f32(path: impl AsRef<Path>) -> Result<Fp32Tensor, FileError> {
    decode_f32(&fs::read(path)?)
}
