//! Two-level-scaled dot products and MX GEMM with FP32 accumulation.
//!
//! Accumulation order is fixed: lanes ascending within a block into an FP32
//! partial, the partial multiplied once by `X_A·X_B`, then block results
//! summed ascending into an FP32 total that starts at `+0`. Parallelism only
//! splits output rows, so results do not depend on the thread count.
//!
//! Whenever every intermediate stays inside FP32's normal range this equals,
//! bit for bit, the same-order FP32 GEMM over the dequantized operands.

use rayon::prelude::*;

use crate::block::{MxBlock, QuantConfig};
use crate::element::ScaleE8M0;
use crate::error::{MxError, Result};
use crate::metrics::{error_report, ErrorReport};
use crate::tensor::{quantize_tensor, Fp32Tensor, MxTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GemmResult {
    pub out: Fp32Tensor,
    pub reference: Option<Fp32Tensor>,
    pub report: Option<ErrorReport>,
}

#[inline]
fn scaled_partial(a_scale: ScaleE8M0, b_scale: ScaleE8M0, partial: f32) -> f32 {
    // the scale product is a power of two in [2^-254, 2^254]: exact in f64
    ((a_scale.to_f64() * b_scale.to_f64()) * partial as f64) as f32
}

#[inline]
fn element_dot(a_lut: &[f32; 256], a: &[u8], b_lut: &[f32; 256], b: &[u8]) -> f32 {
    let mut acc = 0f32;
    for (&pa, &pb) in a.iter().zip(b) {
        acc += a_lut[pa as usize] * b_lut[pb as usize];
    }
    acc
}

/// `(X_A·X_B) · Σ P_Ai·P_Bi` with the element sum in FP32.
pub fn mx_dot(a: &MxBlock, b: &MxBlock) -> Result<f32> {
    if a.k() != b.k() {
        return Err(MxError::BlockSizeMismatch {
            left: a.k(),
            right: b.k(),
        });
    }
    let partial = element_dot(a.fmt.decode_table(), &a.elements, b.fmt.decode_table(), &b.elements);
    Ok(scaled_partial(a.scale, b.scale, partial))
}

fn check_operands(a: &MxTensor, b: &MxTensor) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(MxError::ShapeMismatch(format!(
            "gemm needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(MxError::ShapeMismatch(format!(
            "inner dimensions differ: [{m},{ka}] x [{kb},{n}]"
        )));
    }
    if a.axis() != 1 || b.axis() != 0 {
        return Err(MxError::AxisMismatch(format!(
            "operands must be scaled along the reduction axis (A axis 1, B axis 0), got {} and {}",
            a.axis(),
            b.axis()
        )));
    }
    if a.cfg().block_size != b.cfg().block_size {
        return Err(MxError::BlockSizeMismatch {
            left: a.cfg().block_size,
            right: b.cfg().block_size,
        });
    }
    Ok((m, ka, n))
}

/// `[M,K] × [K,N]` over MX operands, both scaled along K.
///
/// Operands may use different element formats.
pub fn mx_gemm(a: &MxTensor, b: &MxTensor) -> Result<Fp32Tensor> {
    let (m, k_dim, n) = check_operands(a, b)?;
    let k = a.cfg().block_size;
    let blocks = a.blocks_per_fiber();
    let a_lut = a.cfg().element_fmt.decode_table();
    let b_lut = b.cfg().element_fmt.decode_table();

    let mut out = vec![0f32; m * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(row, out_row)| {
        for (col, slot) in out_row.iter_mut().enumerate() {
            let mut total = 0f32;
            for blk in 0..blocks {
                let (ia, ib) = (row * blocks + blk, col * blocks + blk);
                let valid = k.min(k_dim - blk * k);
                let partial = element_dot(
                    a_lut,
                    &a.block_codes(ia)[..valid],
                    b_lut,
                    &b.block_codes(ib)[..valid],
                );
                total += scaled_partial(a.scales()[ia], b.scales()[ib], partial);
            }
            *slot = total;
        }
    });
    Fp32Tensor::new(vec![m, n], out)
}

/// Plain FP32 GEMM, accumulating each output ascending over K from `+0`.
pub fn fp32_gemm(a: &Fp32Tensor, b: &Fp32Tensor) -> Result<Fp32Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(MxError::ShapeMismatch(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0f32; m * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(row, out_row)| {
        for (col, slot) in out_row.iter_mut().enumerate() {
            let mut acc = 0f32;
            for i in 0..k {
                acc += ad[row * k + i] * bd[i * n + col];
            }
            *slot = acc;
        }
    });
    Fp32Tensor::new(vec![m, n], out)
}

pub fn compare_to_fp32(out: &Fp32Tensor, reference: &Fp32Tensor) -> Result<ErrorReport> {
    if out.shape() != reference.shape() {
        return Err(MxError::ShapeMismatch(format!(
            "{:?} vs reference {:?}",
            out.shape(),
            reference.shape()
        )));
    }
    Ok(error_report(reference.data(), out.data()))
}

/// Quantizes both operands along K with their own configs, multiplies them,
/// and optionally compares against the unquantized FP32 product.
pub fn quantized_gemm(
    a: &Fp32Tensor,
    b: &Fp32Tensor,
    a_cfg: &QuantConfig,
    b_cfg: &QuantConfig,
    with_reference: bool,
) -> Result<GemmResult> {
    let qa = quantize_tensor(a, 1, a_cfg)?;
    let qb = quantize_tensor(b, 0, b_cfg)?;
    let out = mx_gemm(&qa, &qb)?;
    let (reference, report) = if with_reference {
        let reference = fp32_gemm(a, b)?;
        let mut report = compare_to_fp32(&out, &reference)?;
        report.nan_block_count = qa.nan_block_count() + qb.nan_block_count();
        (Some(reference), Some(report))
    } else {
        (None, None)
    };
    Ok(GemmResult {
        out,
        reference,
        report,
    })
}
