//! Error metrics between a reference tensor and its quantized counterpart.

use serde::{Serialize, Serializer};

/// Lanes whose reference magnitude is at or below this are skipped when
/// computing the relative error.
pub const REL_ERR_FLOOR: f64 = f32::MIN_POSITIVE as f64;

/// Summary of the difference between a reference and an approximation.
///
/// Only lanes where both sides are finite contribute to the error sums.
/// `sqnr_db` is `+inf` when the error power is zero; in JSON the infinite
/// sentinel is written as the string `"inf"` (or `"-inf"`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mse: f64,
    #[serde(serialize_with = "serialize_db")]
    pub sqnr_db: f64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub clamped_lane_count: usize,
    pub nan_block_count: usize,
    /// Number of lanes that entered `max_rel_err`; zero means the relative
    /// error was not measurable and is reported as 0.
    #[serde(skip)]
    pub rel_err_lanes: usize,
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// `10·log10(signal / noise)`, `+inf` for zero noise.
pub fn sqnr_db(signal_power: f64, noise_power: f64) -> f64 {
    if noise_power == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal_power / noise_power).log10()
    }
}

/// Element-wise comparison of two equally long slices.
pub(crate) fn error_report(reference: &[f32], approx: &[f32]) -> ErrorReport {
    debug_assert_eq!(reference.len(), approx.len());
    let mut signal = 0f64;
    let mut noise = 0f64;
    let mut lanes = 0usize;
    let mut max_abs_err = 0f64;
    let mut max_rel_err = 0f64;
    let mut rel_err_lanes = 0usize;
    for (&r, &q) in reference.iter().zip(approx) {
        if !(r.is_finite() && q.is_finite()) {
            continue;
        }
        let (r, q) = (r as f64, q as f64);
        let err = (r - q).abs();
        signal += r * r;
        noise += err * err;
        lanes += 1;
        max_abs_err = max_abs_err.max(err);
        if r.abs() > REL_ERR_FLOOR {
            max_rel_err = max_rel_err.max(err / r.abs());
            rel_err_lanes += 1;
        }
    }
    ErrorReport {
        mse: if lanes == 0 { 0.0 } else { noise / lanes as f64 },
        sqnr_db: sqnr_db(signal, noise),
        max_abs_err,
        max_rel_err,
        clamped_lane_count: 0,
        nan_block_count: 0,
        rel_err_lanes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_exact() {
        let r = error_report(&[1.0, -2.0, 3.0], &[1.0, -2.0, 3.0]);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.sqnr_db, f64::INFINITY);
        assert_eq!(r.rel_err_lanes, 3);
    }

    #[test]
    fn zero_reference_skips_relative() {
        let r = error_report(&[0.0, 0.0], &[0.5, -0.5]);
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.rel_err_lanes, 0);
        assert_eq!(r.mse, 0.25);
        assert_eq!(r.sqnr_db, f64::NEG_INFINITY);
    }

    #[test]
    fn simple_values() {
        let r = error_report(&[1.0, 2.0], &[1.5, 2.0]);
        assert_eq!(r.mse, 0.125);
        assert_eq!(r.max_abs_err, 0.5);
        assert_eq!(r.max_rel_err, 0.5);
        assert!((r.sqnr_db - 10.0 * (5.0f64 / 0.25).log10()).abs() < 1e-12);
    }

    #[test]
    fn json_keys_and_sentinel() {
        let r = error_report(&[1.0], &[1.0]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"mse":0.0,"sqnr_db":"inf","max_abs_err":0.0,"max_rel_err":0.0,"clamped_lane_count":0,"nan_block_count":0}"#
        );
    }
}
