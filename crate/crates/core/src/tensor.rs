//! FP32 tensors and MX tensors quantized along one principal axis.
//!
//! An [`MxTensor`] keeps its scales and element codes in two separate arrays.
//! Blocks are ordered fiber by fiber: every coordinate outside the principal
//! axis (row-major) names one fiber, and the `ceil(dim / k)` blocks of a fiber
//! are consecutive. A trailing partial block is zero-padded; padding lanes do
//! not participate in the scale and are dropped on dequantization.

use rayon::prelude::*;

use crate::block::{dequantize_lanes, quantize_lanes, MxBlock, QuantConfig, QuantStats};
use crate::element::ScaleE8M0;
use crate::error::{MxError, Result};

pub const MAX_RANK: usize = 4;

/// Dense row-major FP32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp32Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Fp32Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(MxError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Fp32Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Fp32Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a rank-2 tensor from rows of equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(MxError::ShapeMismatch(format!(
                    "ragged rows: {} vs {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Fp32Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major element at `(row, col)` of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.shape[1] + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Fp32Tensor {
        Fp32Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bitwise equality, treating NaNs with identical payload as equal.
    pub fn bit_eq(&self, other: &Fp32Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Strides of the fiber decomposition around `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AxisLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
    pub k: usize,
}

impl AxisLayout {
    pub fn new(shape: &[usize], axis: usize, k: usize) -> Self {
        AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
            k,
        }
    }

    pub fn fibers(&self) -> usize {
        self.outer * self.inner
    }

    pub fn blocks_per_fiber(&self) -> usize {
        self.len.div_ceil(self.k)
    }

    pub fn num_blocks(&self) -> usize {
        self.fibers() * self.blocks_per_fiber()
    }

    /// Flat index of lane `pos` (along the axis) of fiber `fiber`.
    #[inline]
    pub fn offset(&self, fiber: usize, pos: usize) -> usize {
        let (o, i) = (fiber / self.inner, fiber % self.inner);
        (o * self.len + pos) * self.inner + i
    }
}

pub(crate) fn check_shape(shape: &[usize], axis: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(MxError::RankError {
            rank: shape.len(),
            expected: "1..=4",
        });
    }
    if axis >= shape.len() {
        return Err(MxError::AxisMismatch(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(MxError::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// A tensor stored as MX blocks along its principal axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MxTensor {
    shape: Vec<usize>,
    axis: usize,
    cfg: QuantConfig,
    scales: Vec<ScaleE8M0>,
    codes: Vec<u8>,
}

impl MxTensor {
    /// Assembles a tensor from raw parts, validating every size and code.
    pub fn from_parts(
        shape: Vec<usize>,
        axis: usize,
        cfg: QuantConfig,
        scales: Vec<ScaleE8M0>,
        codes: Vec<u8>,
    ) -> Result<Self> {
        check_shape(&shape, axis)?;
        cfg.validate()?;
        let layout = AxisLayout::new(&shape, axis, cfg.block_size);
        let blocks = layout.num_blocks();
        if scales.len() != blocks {
            return Err(MxError::LengthMismatch {
                expected: blocks,
                got: scales.len(),
            });
        }
        if codes.len() != blocks * cfg.block_size {
            return Err(MxError::LengthMismatch {
                expected: blocks * cfg.block_size,
                got: codes.len(),
            });
        }
        let mask = cfg.element_fmt.code_mask();
        if let Some(bad) = codes.iter().find(|&&c| c & !mask != 0) {
            return Err(MxError::InvalidConfig(format!(
                "element code {bad:#04x} does not fit {} bits",
                cfg.element_fmt.total_bits()
            )));
        }
        Ok(MxTensor {
            shape,
            axis,
            cfg,
            scales,
            codes,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn cfg(&self) -> &QuantConfig {
        &self.cfg
    }

    pub fn scales(&self) -> &[ScaleE8M0] {
        &self.scales
    }

    /// One code per lane, padding lanes included.
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    pub fn blocks_per_fiber(&self) -> usize {
        self.layout().blocks_per_fiber()
    }

    pub(crate) fn layout(&self) -> AxisLayout {
        AxisLayout::new(&self.shape, self.axis, self.cfg.block_size)
    }

    pub fn block_codes(&self, index: usize) -> &[u8] {
        let k = self.cfg.block_size;
        &self.codes[index * k..(index + 1) * k]
    }

    pub fn block(&self, index: usize) -> MxBlock {
        MxBlock {
            scale: self.scales[index],
            elements: self.block_codes(index).to_vec(),
            fmt: self.cfg.element_fmt,
        }
    }

    pub fn nan_block_count(&self) -> usize {
        self.scales.iter().filter(|s| s.is_nan()).count()
    }
}

/// Quantizes `t` blockwise along `axis`.
pub fn quantize_tensor(t: &Fp32Tensor, axis: usize, cfg: &QuantConfig) -> Result<MxTensor> {
    quantize_tensor_with_stats(t, axis, cfg).map(|(mt, _)| mt)
}

pub fn quantize_tensor_with_stats(
    t: &Fp32Tensor,
    axis: usize,
    cfg: &QuantConfig,
) -> Result<(MxTensor, QuantStats)> {
    check_shape(&t.shape, axis)?;
    cfg.validate()?;
    let layout = AxisLayout::new(&t.shape, axis, cfg.block_size);
    let k = cfg.block_size;
    let per_fiber = layout.blocks_per_fiber();
    let mut scales = vec![ScaleE8M0::NAN; layout.num_blocks()];
    let mut codes = vec![0u8; layout.num_blocks() * k];

    let stats = codes
        .par_chunks_mut(per_fiber * k)
        .zip(scales.par_chunks_mut(per_fiber))
        .enumerate()
        .map(|(fiber, (fiber_codes, fiber_scales))| {
            let lanes: Vec<f32> = (0..layout.len)
                .map(|p| t.data[layout.offset(fiber, p)])
                .collect();
            let mut stats = QuantStats::default();
            for ((chunk, block_codes), scale) in lanes
                .chunks(k)
                .zip(fiber_codes.chunks_mut(k))
                .zip(fiber_scales.iter_mut())
            {
                *scale = quantize_lanes(chunk, cfg.element_fmt, cfg.rounding, block_codes, &mut stats);
            }
            stats
        })
        .reduce(QuantStats::default, QuantStats::merge);

    Ok((
        MxTensor {
            shape: t.shape.clone(),
            axis,
            cfg: *cfg,
            scales,
            codes,
        },
        stats,
    ))
}

/// Inverse layout of [`quantize_tensor`]; padding lanes are dropped.
pub fn dequantize_tensor(mt: &MxTensor) -> Fp32Tensor {
    let layout = mt.layout();
    let k = mt.cfg.block_size;
    let per_fiber = layout.blocks_per_fiber();
    let mut out = Fp32Tensor::zeros(mt.shape.clone());
    let mut lanes = vec![0f32; per_fiber * k];
    for fiber in 0..layout.fibers() {
        for b in 0..per_fiber {
            let index = fiber * per_fiber + b;
            dequantize_lanes(
                mt.scales[index],
                mt.cfg.element_fmt,
                mt.block_codes(index),
                &mut lanes[b * k..(b + 1) * k],
            );
        }
        for (p, &v) in lanes[..layout.len].iter().enumerate() {
            out.data[layout.offset(fiber, p)] = v;
        }
    }
    out
}

/// Exact transpose of a rank-2 tensor.
pub fn transpose_2d(t: &Fp32Tensor) -> Result<Fp32Tensor> {
    if t.rank() != 2 {
        return Err(MxError::RankError {
            rank: t.rank(),
            expected: "2",
        });
    }
    let (rows, cols) = (t.shape[0], t.shape[1]);
    let mut data = Vec::with_capacity(t.len());
    for c in 0..cols {
        data.extend((0..rows).map(|r| t.data[r * cols + c]));
    }
    Ok(Fp32Tensor {
        shape: vec![cols, rows],
        data,
    })
}
