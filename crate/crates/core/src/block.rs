//! MX blocks: one E8M0 scale shared by `k` element codes.
//!
//! Conversion from FP32 follows the reference recipe:
//!
//! 1. `shared_exp = floor(log2(max |V_i|)) - emax_elem`
//! 2. `X = 2^shared_exp`
//! 3. `P_i = quantize(V_i / X)`, saturating finite values at the format limits
//!
//! with these additional rules:
//!
//! * FP32-subnormal inputs produce element code 0.
//! * A NaN lane, or an Inf lane in a format without Inf, turns the whole block
//!   into NaN through the scale.
//! * In Inf-capable formats Inf lanes are stored as Inf and do not take part
//!   in the max.
//! * An all-zero block gets the smallest scale, `2^-127`.

use serde::Serialize;

use crate::element::{exp2i, ElementFormat, RoundingMode, ScaleE8M0};
use crate::error::{MxError, Result};
use crate::metrics::{error_report, ErrorReport};

pub const DEFAULT_BLOCK_SIZE: usize = 32;
/// Largest block size that fits the MXT header.
pub const MAX_BLOCK_SIZE: usize = u16::MAX as usize;

/// What to do with NaN/Inf inputs the element format cannot hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub enum SpecialPolicy {
    /// Mark the whole block NaN through its scale.
    #[default]
    ScaleNaNOnSpecialInput,
}

/// Parameters governing every FP32 → MX conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    pub element_fmt: ElementFormat,
    pub block_size: usize,
    pub rounding: RoundingMode,
    pub special_policy: SpecialPolicy,
}

impl QuantConfig {
    /// Block size 32, round-half-to-nearest-even.
    pub fn new(element_fmt: ElementFormat) -> Self {
        QuantConfig {
            element_fmt,
            block_size: DEFAULT_BLOCK_SIZE,
            rounding: RoundingMode::RoundHalfToNearestEven,
            special_policy: SpecialPolicy::ScaleNaNOnSpecialInput,
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn with_rounding(mut self, rounding: RoundingMode) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.block_size > MAX_BLOCK_SIZE {
            return Err(MxError::InvalidConfig(format!(
                "block size {} outside 1..={MAX_BLOCK_SIZE}",
                self.block_size
            )));
        }
        Ok(())
    }
}

/// One shared scale plus `k` element codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MxBlock {
    pub scale: ScaleE8M0,
    pub elements: Vec<u8>,
    pub fmt: ElementFormat,
}

impl MxBlock {
    pub fn k(&self) -> usize {
        self.elements.len()
    }

    pub fn is_nan(&self) -> bool {
        self.scale.is_nan()
    }
}

/// Side information collected while quantizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantStats {
    /// Finite lanes whose scaled value fell outside the element range.
    pub clamped_lanes: usize,
    /// Blocks whose scale is NaN.
    pub nan_blocks: usize,
}

impl QuantStats {
    pub fn merge(self, other: QuantStats) -> QuantStats {
        QuantStats {
            clamped_lanes: self.clamped_lanes + other.clamped_lanes,
            nan_blocks: self.nan_blocks + other.nan_blocks,
        }
    }
}

/// `floor(log2 |x|)` from the FP32 bit pattern, `None` for zero.
/// Valid for subnormals.
#[inline]
fn floor_log2_abs(x: f32) -> Option<i32> {
    let bits = x.to_bits() & 0x7fff_ffff;
    let exp = (bits >> 23) as i32;
    if exp != 0 {
        return Some(exp - 127);
    }
    let mantissa = bits & 0x7f_ffff;
    (mantissa != 0).then(|| (31 - mantissa.leading_zeros() as i32) - 149)
}

/// Shared exponent over the finite lanes of `values`; non-finite lanes are skipped.
fn shared_exp_of_finite(values: &[f32], fmt: ElementFormat) -> i32 {
    let max_bits = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| v.to_bits() & 0x7fff_ffff)
        .max()
        .unwrap_or(0);
    match floor_log2_abs(f32::from_bits(max_bits)) {
        Some(e) => (e - fmt.emax()).clamp(ScaleE8M0::MIN_EXP, ScaleE8M0::MAX_EXP),
        None => ScaleE8M0::MIN_EXP,
    }
}

/// `floor(log2(max |V_i|)) - emax`, clamped into the E8M0 range.
/// An all-zero vector yields -127.
pub fn compute_shared_exp(values: &[f32], fmt: ElementFormat) -> Result<i32> {
    if values.is_empty() {
        return Err(MxError::LengthMismatch {
            expected: 1,
            got: 0,
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MxError::SpecialInput);
    }
    Ok(shared_exp_of_finite(values, fmt))
}

/// Quantizes `values` into `codes`; lanes of `codes` past `values.len()` are
/// padding and get code 0. Returns the block scale.
pub(crate) fn quantize_lanes(
    values: &[f32],
    fmt: ElementFormat,
    rounding: RoundingMode,
    codes: &mut [u8],
    stats: &mut QuantStats,
) -> ScaleE8M0 {
    debug_assert!(values.len() <= codes.len());
    codes.fill(0);

    let block_nan = values
        .iter()
        .any(|v| v.is_nan() || (v.is_infinite() && !fmt.has_inf()));
    if block_nan {
        stats.nan_blocks += 1;
        return ScaleE8M0::NAN;
    }

    let scale = ScaleE8M0::from_exponent(shared_exp_of_finite(values, fmt));
    let inv_scale = exp2i(-scale.exponent().unwrap());
    for (code, &v) in codes.iter_mut().zip(values) {
        if v.is_infinite() {
            *code = fmt.inf_code(v < 0.0).unwrap();
        } else if v.is_subnormal() {
            *code = 0;
        } else {
            let scaled = v as f64 * inv_scale;
            if scaled > fmt.vmax() || scaled < fmt.vmin() {
                stats.clamped_lanes += 1;
            }
            *code = fmt.encode_finite(scaled, rounding);
        }
    }
    scale
}

/// Dequantizes `codes` under `scale` into `out` (`out.len()` lanes).
pub(crate) fn dequantize_lanes(scale: ScaleE8M0, fmt: ElementFormat, codes: &[u8], out: &mut [f32]) {
    if scale.is_nan() {
        out.fill(f32::NAN);
        return;
    }
    let x = scale.to_f64();
    for (o, &c) in out.iter_mut().zip(codes) {
        // exact product in f64, single rounding into f32 (overflow -> ±Inf)
        *o = (x * fmt.decode(c)) as f32;
    }
}

/// Converts exactly `cfg.block_size` values into one block.
pub fn quantize_block(values: &[f32], cfg: &QuantConfig) -> Result<MxBlock> {
    quantize_block_with_stats(values, cfg).map(|(b, _)| b)
}

pub fn quantize_block_with_stats(values: &[f32], cfg: &QuantConfig) -> Result<(MxBlock, QuantStats)> {
    cfg.validate()?;
    if values.len() != cfg.block_size {
        return Err(MxError::LengthMismatch {
            expected: cfg.block_size,
            got: values.len(),
        });
    }
    let mut elements = vec![0u8; cfg.block_size];
    let mut stats = QuantStats::default();
    let scale = quantize_lanes(values, cfg.element_fmt, cfg.rounding, &mut elements, &mut stats);
    Ok((
        MxBlock {
            scale,
            elements,
            fmt: cfg.element_fmt,
        },
        stats,
    ))
}

/// `v_i = X * P_i`, or NaN in every lane when the scale is NaN.
pub fn dequantize_block(block: &MxBlock) -> Vec<f32> {
    let mut out = vec![0f32; block.k()];
    dequantize_lanes(block.scale, block.fmt, &block.elements, &mut out);
    out
}

/// Error of a quantize/dequantize round trip over a vector of any length,
/// split into consecutive blocks of `cfg.block_size` (last one padded).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantErrorReport {
    #[serde(flatten)]
    pub report: ErrorReport,
    pub block_max_abs_err: Vec<f64>,
}

pub fn quantization_error(values: &[f32], cfg: &QuantConfig) -> Result<QuantErrorReport> {
    cfg.validate()?;
    let k = cfg.block_size;
    let mut restored = vec![0f32; values.len()];
    let mut codes = vec![0u8; k];
    let mut stats = QuantStats::default();
    let mut block_max_abs_err = Vec::with_capacity(values.len().div_ceil(k));
    for (chunk, out) in values.chunks(k).zip(restored.chunks_mut(k)) {
        let scale = quantize_lanes(chunk, cfg.element_fmt, cfg.rounding, &mut codes, &mut stats);
        dequantize_lanes(scale, cfg.element_fmt, &codes, out);
        block_max_abs_err.push(error_report(chunk, out).max_abs_err);
    }
    let mut report = error_report(values, &restored);
    report.clamped_lane_count = stats.clamped_lanes;
    report.nan_block_count = stats.nan_blocks;
    Ok(QuantErrorReport {
        report,
        block_max_abs_err,
    })
}
