//! Scalar element codecs and the E8M0 shared-scale format.
//!
//! Float element layouts are `sign | exponent | mantissa` with IEEE-style
//! subnormals. Special encodings follow the OCP conventions:
//!
//! | format | bias | emax | max finite | specials                       |
//! |--------|------|------|------------|--------------------------------|
//! | E4M3   | 7    | 8    | 448        | `S.1111.111` is NaN, no Inf    |
//! | E5M2   | 15   | 15   | 57344      | `S.11111.00` Inf, other NaN    |
//! | E2M3   | 1    | 2    | 7.5        | none                           |
//! | E3M2   | 3    | 4    | 28         | none                           |
//! | E2M1   | 1    | 2    | 6          | none                           |
//! | INT8   | -    | 0    | 127/64     | none (two's complement, ×2⁻⁶)  |
//!
//! All arithmetic is carried out in `f64`, where every element value, every
//! rounding midpoint and every E8M0 scale is exact.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{MxError, Result};

/// Exact `2^n` as an `f64` for `n` in the normal exponent range.
#[inline]
pub(crate) fn exp2i(n: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&n));
    f64::from_bits(((n + 1023) as u64) << 52)
}

/// Tie-breaking rule used when a value falls exactly between two codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RoundingMode {
    #[default]
    RoundHalfToNearestEven,
    RoundHalfAwayFromZero,
}

impl RoundingMode {
    pub const ALL: [RoundingMode; 2] = [
        RoundingMode::RoundHalfToNearestEven,
        RoundingMode::RoundHalfAwayFromZero,
    ];

    /// Rounds `x` to an integer. Exact for every finite `f64`.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            RoundingMode::RoundHalfToNearestEven => x.round_ties_even(),
            RoundingMode::RoundHalfAwayFromZero => x.round(),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            RoundingMode::RoundHalfToNearestEven => "rne",
            RoundingMode::RoundHalfAwayFromZero => "rhaz",
        }
    }

    /// Identifier used in the MXT file header.
    pub fn id(self) -> u8 {
        match self {
            RoundingMode::RoundHalfToNearestEven => 0,
            RoundingMode::RoundHalfAwayFromZero => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(RoundingMode::RoundHalfToNearestEven),
            1 => Some(RoundingMode::RoundHalfAwayFromZero),
            _ => None,
        }
    }
}

impl FromStr for RoundingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rne" => Ok(RoundingMode::RoundHalfToNearestEven),
            "rhaz" => Ok(RoundingMode::RoundHalfAwayFromZero),
            other => Err(format!("unknown rounding mode '{other}' (expected rne or rhaz)")),
        }
    }
}

/// A scalar element encoding from the concrete MX format family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementFormat {
    E4M3,
    E5M2,
    E2M3,
    E3M2,
    E2M1,
    Int8,
}

impl ElementFormat {
    pub const ALL: [ElementFormat; 6] = [
        ElementFormat::E4M3,
        ElementFormat::E5M2,
        ElementFormat::E2M3,
        ElementFormat::E3M2,
        ElementFormat::E2M1,
        ElementFormat::Int8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ElementFormat::E4M3 => "E4M3",
            ElementFormat::E5M2 => "E5M2",
            ElementFormat::E2M3 => "E2M3",
            ElementFormat::E3M2 => "E3M2",
            ElementFormat::E2M1 => "E2M1",
            ElementFormat::Int8 => "INT8",
        }
    }

    /// Name of the MX format built on this element type, as accepted by the CLI.
    pub fn mx_name(self) -> &'static str {
        match self {
            ElementFormat::E4M3 => "mxfp8_e4m3",
            ElementFormat::E5M2 => "mxfp8_e5m2",
            ElementFormat::E2M3 => "mxfp6_e2m3",
            ElementFormat::E3M2 => "mxfp6_e3m2",
            ElementFormat::E2M1 => "mxfp4",
            ElementFormat::Int8 => "mxint8",
        }
    }

    /// Identifier used in the MXT file header.
    pub fn id(self) -> u8 {
        match self {
            ElementFormat::E4M3 => 0,
            ElementFormat::E5M2 => 1,
            ElementFormat::E2M3 => 2,
            ElementFormat::E3M2 => 3,
            ElementFormat::E2M1 => 4,
            ElementFormat::Int8 => 5,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub const fn total_bits(self) -> u32 {
        match self {
            ElementFormat::E4M3 | ElementFormat::E5M2 | ElementFormat::Int8 => 8,
            ElementFormat::E2M3 | ElementFormat::E3M2 => 6,
            ElementFormat::E2M1 => 4,
        }
    }

    /// Zero for INT8.
    pub const fn exponent_bits(self) -> u32 {
        match self {
            ElementFormat::E4M3 => 4,
            ElementFormat::E5M2 => 5,
            ElementFormat::E2M3 => 2,
            ElementFormat::E3M2 => 3,
            ElementFormat::E2M1 => 2,
            ElementFormat::Int8 => 0,
        }
    }

    /// For INT8 this is the number of magnitude bits (7).
    pub const fn mantissa_bits(self) -> u32 {
        match self {
            ElementFormat::E4M3 => 3,
            ElementFormat::E5M2 => 2,
            ElementFormat::E2M3 => 3,
            ElementFormat::E3M2 => 2,
            ElementFormat::E2M1 => 1,
            ElementFormat::Int8 => 7,
        }
    }

    pub const fn bias(self) -> i32 {
        match self {
            ElementFormat::E4M3 => 7,
            ElementFormat::E5M2 => 15,
            ElementFormat::E2M3 => 1,
            ElementFormat::E3M2 => 3,
            ElementFormat::E2M1 => 1,
            ElementFormat::Int8 => 0,
        }
    }

    /// Exponent of the largest normal value.
    pub const fn emax(self) -> i32 {
        match self {
            ElementFormat::E4M3 => 8,
            ElementFormat::E5M2 => 15,
            ElementFormat::E2M3 => 2,
            ElementFormat::E3M2 => 4,
            ElementFormat::E2M1 => 2,
            ElementFormat::Int8 => 0,
        }
    }

    /// Largest finite magnitude.
    pub const fn vmax(self) -> f64 {
        match self {
            ElementFormat::E4M3 => 448.0,
            ElementFormat::E5M2 => 57344.0,
            ElementFormat::E2M3 => 7.5,
            ElementFormat::E3M2 => 28.0,
            ElementFormat::E2M1 => 6.0,
            ElementFormat::Int8 => 1.984375,
        }
    }

    /// Most negative finite value. Equal to `-vmax` except for INT8, whose
    /// two's-complement range reaches -2.0.
    pub const fn vmin(self) -> f64 {
        match self {
            ElementFormat::Int8 => -2.0,
            _ => -self.vmax(),
        }
    }

    pub const fn has_inf(self) -> bool {
        matches!(self, ElementFormat::E5M2)
    }

    pub const fn has_nan(self) -> bool {
        matches!(self, ElementFormat::E4M3 | ElementFormat::E5M2)
    }

    pub const fn is_float(self) -> bool {
        !matches!(self, ElementFormat::Int8)
    }

    pub const fn code_mask(self) -> u8 {
        ((1u16 << self.total_bits()) - 1) as u8
    }

    pub const fn num_codes(self) -> usize {
        1 << self.total_bits()
    }

    const fn sign_bit(self) -> u8 {
        1 << (self.total_bits() - 1)
    }

    /// Code emitted when encoding NaN.
    pub const fn nan_code(self) -> Option<u8> {
        match self {
            ElementFormat::E4M3 => Some(0x7f),
            // quiet NaN: exponent all ones, mantissa MSB set
            ElementFormat::E5M2 => Some(0x7e),
            _ => None,
        }
    }

    pub const fn inf_code(self, negative: bool) -> Option<u8> {
        match self {
            ElementFormat::E5M2 => Some(if negative { 0xfc } else { 0x7c }),
            _ => None,
        }
    }

    /// Decodes `code` (only the low `total_bits` are significant).
    pub fn decode(self, code: u8) -> f64 {
        let code = code & self.code_mask();
        if let ElementFormat::Int8 = self {
            return (code as i8) as f64 / 64.0;
        }
        let m = self.mantissa_bits();
        let negative = code & self.sign_bit() != 0;
        let exp = ((code >> m) & ((1 << self.exponent_bits()) - 1)) as i32;
        let man = (code & ((1 << m) - 1)) as i32;

        match self {
            ElementFormat::E4M3 if exp == 0xf && man == 0x7 => return f64::NAN,
            ElementFormat::E5M2 if exp == 0x1f => {
                return match (man, negative) {
                    (0, false) => f64::INFINITY,
                    (0, true) => f64::NEG_INFINITY,
                    _ => f64::NAN,
                };
            }
            _ => {}
        }

        let magnitude = if exp == 0 {
            man as f64 * exp2i(1 - self.bias() - m as i32)
        } else {
            ((1 << m) + man) as f64 * exp2i(exp - self.bias() - m as i32)
        };
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }

    /// Encodes `value` to the nearest representable code.
    ///
    /// Finite values beyond the representable range saturate to the extreme
    /// finite value of the same sign. Negative values that round to zero keep
    /// the sign bit in float formats.
    pub fn encode(self, value: f64, rounding: RoundingMode) -> Result<u8> {
        if value.is_nan() {
            return self
                .nan_code()
                .ok_or(MxError::UnrepresentableSpecial { fmt: self, value });
        }
        if value.is_infinite() {
            return self
                .inf_code(value < 0.0)
                .ok_or(MxError::UnrepresentableSpecial { fmt: self, value });
        }
        Ok(self.encode_finite(value, rounding))
    }

    /// Encoding kernel for finite inputs.
    #[inline]
    pub(crate) fn encode_finite(self, value: f64, rounding: RoundingMode) -> u8 {
        debug_assert!(value.is_finite());
        if let ElementFormat::Int8 = self {
            let q = rounding.round(value * 64.0).clamp(-128.0, 127.0);
            return (q as i8) as u8;
        }

        let m = self.mantissa_bits() as i32;
        let sign = if value.is_sign_negative() {
            self.sign_bit()
        } else {
            0
        };
        let magnitude = value.abs().min(self.vmax());
        let min_exp = 1 - self.bias();
        let mut exp = if magnitude == 0.0 {
            min_exp
        } else {
            (((magnitude.to_bits() >> 52) & 0x7ff) as i32 - 1023).max(min_exp)
        };
        // number of ulps; lies in [0, 2^(m+1)]
        let mut steps = rounding.round(magnitude / exp2i(exp - m)) as i32;
        if steps == 1 << (m + 1) {
            exp += 1;
            steps = 1 << m;
        }
        let (exp_field, man) = if steps < (1 << m) {
            // only reachable from the subnormal binade
            debug_assert_eq!(exp, min_exp);
            (0, steps)
        } else {
            (exp + self.bias(), steps - (1 << m))
        };
        sign | ((exp_field as u8) << m) | man as u8
    }

    /// Decode table indexed by the full byte; entries beyond `num_codes` repeat
    /// the masked decoding.
    pub fn decode_table(self) -> &'static [f32; 256] {
        static TABLES: [OnceLock<[f32; 256]>; 6] = [const { OnceLock::new() }; 6];
        TABLES[self.id() as usize].get_or_init(|| {
            let mut table = [0f32; 256];
            for (code, slot) in table.iter_mut().enumerate() {
                *slot = self.decode(code as u8) as f32;
            }
            table
        })
    }
}

impl fmt::Display for ElementFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementFormat {
    type Err = String;

    /// Accepts either the MX format name (`mxfp6_e3m2`) or the bare element name (`e3m2`).
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|f| f.mx_name() == lower || f.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| {
                format!(
                    "unknown format '{s}' (expected one of mxint8, mxfp8_e4m3, mxfp8_e5m2, mxfp6_e2m3, mxfp6_e3m2, mxfp4)"
                )
            })
    }
}

/// An E8M0 shared scale: `2^(code - 127)`, with code 255 reserved for NaN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleE8M0 {
    pub code: u8,
}

impl ScaleE8M0 {
    pub const NAN: ScaleE8M0 = ScaleE8M0 { code: 0xff };
    pub const ONE: ScaleE8M0 = ScaleE8M0 { code: 127 };
    pub const MIN_EXP: i32 = -127;
    pub const MAX_EXP: i32 = 127;

    pub const fn from_code(code: u8) -> Self {
        ScaleE8M0 { code }
    }

    /// Scale `2^exp`, saturating `exp` into the representable range.
    pub fn from_exponent(exp: i32) -> Self {
        let exp = exp.clamp(Self::MIN_EXP, Self::MAX_EXP);
        ScaleE8M0 {
            code: (exp + 127) as u8,
        }
    }

    pub fn is_nan(self) -> bool {
        self.code == 0xff
    }

    pub fn exponent(self) -> Option<i32> {
        (!self.is_nan()).then(|| self.code as i32 - 127)
    }

    pub fn to_f64(self) -> f64 {
        match self.exponent() {
            Some(e) => exp2i(e),
            None => f64::NAN,
        }
    }
}

pub fn decode_element(fmt: ElementFormat, code: u8) -> f64 {
    fmt.decode(code)
}

pub fn encode_element(fmt: ElementFormat, value: f64, rounding: RoundingMode) -> Result<u8> {
    fmt.encode(value, rounding)
}

pub fn decode_scale(scale: ScaleE8M0) -> f64 {
    scale.to_f64()
}

/// Every code of `fmt` with its decoded value: finite values ascending
/// (`-0` before `+0`), then `-Inf`, `+Inf`, then NaN codes.
pub fn enumerate_format(fmt: ElementFormat) -> Vec<(u8, f64)> {
    let mut entries: Vec<(u8, f64)> = (0..fmt.num_codes())
        .map(|c| (c as u8, fmt.decode(c as u8)))
        .collect();
    let class = |v: f64| {
        if v.is_nan() {
            2
        } else if v.is_infinite() {
            1
        } else {
            0
        }
    };
    entries.sort_by(|a, b| {
        class(a.1)
            .cmp(&class(b.1))
            .then(a.1.total_cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    entries
}
