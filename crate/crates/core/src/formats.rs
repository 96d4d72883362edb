//! Software emulation of the FP8 (E5M2, E4M3) and FP16 storage formats.
//!
//! Only rounding onto the format grid is emulated; arithmetic stays in `f32`.
//! Rounding is round-to-nearest-even everywhere. FP8 encoding saturates at the
//! largest finite value, so `encode` never yields an Inf or NaN code. E4M3 is
//! the ML variant without infinities (`S.1111.111` is its only NaN pattern).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest finite binary16 value.
pub const FP16_MAX: f32 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fp8Format {
    E5M2,
    E4M3,
}

impl Fp8Format {
    pub const ALL: [Fp8Format; 2] = [Fp8Format::E5M2, Fp8Format::E4M3];

    pub const fn exponent_bits(self) -> u32 {
        match self {
            Fp8Format::E5M2 => 5,
            Fp8Format::E4M3 => 4,
        }
    }

    pub const fn mantissa_bits(self) -> u32 {
        match self {
            Fp8Format::E5M2 => 2,
            Fp8Format::E4M3 => 3,
        }
    }

    pub const fn bias(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    /// Magnitude bits (sign cleared) of the largest finite code.
    pub const fn max_finite_code(self) -> u8 {
        match self {
            // exponent 30, mantissa 11
            Fp8Format::E5M2 => 0x7B,
            // exponent 15, mantissa 110; 111 is NaN
            Fp8Format::E4M3 => 0x7E,
        }
    }

    pub fn max_finite(self) -> f32 {
        decode_magnitude(
            self.max_finite_code() as u32,
            self.mantissa_bits(),
            self.bias(),
        ) as f32
    }

    pub fn name(self) -> &'static str {
        match self {
            Fp8Format::E5M2 => "fp8_e5m2",
            Fp8Format::E4M3 => "fp8_e4m3",
        }
    }

    /// True when `code` decodes to a finite value.
    pub fn is_finite_code(self, code: u8) -> bool {
        let mag = code & 0x7F;
        match self {
            Fp8Format::E5M2 => mag >> 2 != 0x1F,
            Fp8Format::E4M3 => mag != 0x7F,
        }
    }
}

/// Rounds a non-negative, finite magnitude onto the grid of a binary float
/// with `man_bits` stored mantissa bits and exponent `bias`, returning the
/// magnitude code `(exponent_field << man_bits) | mantissa`.
///
/// The exponent range is unbounded above, so callers handle overflow. The
/// result for a magnitude that rounds up across a binade is the next
/// exponent's zero mantissa, which falls out of the addition below.
fn round_magnitude(a: f64, man_bits: u32, bias: i32) -> u64 {
    debug_assert!(a >= 0.0 && a.is_finite());
    if a == 0.0 {
        return 0;
    }
    let min_exp = 1 - bias;
    // `a` comes from an f32, so it is a normal f64.
    let exp = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let implicit = 1u64 << man_bits;
    if exp < min_exp {
        // Subnormal range: fixed quantum 2^(min_exp - man_bits). A result of
        // `implicit` is the smallest normal, whose code is also `implicit`.
        let q = a * pow2(man_bits as i32 - min_exp);
        q.round_ties_even() as u64
    } else {
        let q = a * pow2(man_bits as i32 - exp);
        let n = q.round_ties_even() as u64;
        let exp_field = (exp + bias) as u64;
        (exp_field << man_bits) + n - implicit
    }
}

fn decode_magnitude(mag: u32, man_bits: u32, bias: i32) -> f64 {
    let exp_field = (mag >> man_bits) as i32;
    let mant = (mag & ((1 << man_bits) - 1)) as f64;
    if exp_field == 0 {
        mant * pow2(1 - bias - man_bits as i32)
    } else {
        (pow2(man_bits as i32) + mant) * pow2(exp_field - bias - man_bits as i32)
    }
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Encodes `x` as an FP8 code, round-to-nearest-even with saturation.
pub fn fp8_encode(x: f32, fmt: Fp8Format) -> Result<u8> {
    if x.is_nan() {
        return Err(Error::InvalidArgument("cannot encode NaN as fp8".into()));
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let mag = if x.is_infinite() {
        fmt.max_finite_code() as u64
    } else {
        round_magnitude(x.abs() as f64, fmt.mantissa_bits(), fmt.bias())
            .min(fmt.max_finite_code() as u64)
    };
    Ok(sign | mag as u8)
}

/// Exact value of an FP8 code. E5M2 infinity and NaN codes decode to their
/// IEEE counterparts; `encode` never produces them.
pub fn fp8_decode(code: u8, fmt: Fp8Format) -> f32 {
    let negative = code & 0x80 != 0;
    let mag = (code & 0x7F) as u32;
    let value = if !fmt.is_finite_code(code) {
        match fmt {
            Fp8Format::E5M2 if mag & 0x3 == 0 => f32::INFINITY,
            _ => f32::NAN,
        }
    } else {
        decode_magnitude(mag, fmt.mantissa_bits(), fmt.bias()) as f32
    };
    if negative {
        -value
    } else {
        value
    }
}

/// Nearest FP8 value of `x` as an `f32`.
pub fn fp8_round(x: f32, fmt: Fp8Format) -> Result<f32> {
    fp8_encode(x, fmt).map(|c| fp8_decode(c, fmt))
}

/// Elementwise encode-then-decode.
pub fn fp8_quantize_tensor(x: &Tensor, fmt: Fp8Format) -> Result<Tensor> {
    x.try_map(|v| fp8_round(v, fmt))
}

/// Rounds to the nearest binary16 value. Magnitudes above [`FP16_MAX`] are an
/// error rather than Inf, since they mean a spike FP16 cannot hold.
pub fn fp16_round(x: f32) -> Result<f32> {
    if x.is_nan() {
        return Err(Error::InvalidArgument("cannot round NaN to fp16".into()));
    }
    if x.abs() > FP16_MAX {
        return Err(Error::Overflow {
            value: x,
            format: "fp16",
            max: FP16_MAX,
        });
    }
    let mag = round_magnitude(x.abs() as f64, 10, 15);
    let v = decode_magnitude(mag as u32, 10, 15) as f32;
    Ok(if x.is_sign_negative() { -v } else { v })
}

pub fn fp16_round_tensor(x: &Tensor) -> Result<Tensor> {
    x.try_map(fp16_round)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_constants() {
        assert_eq!(Fp8Format::E5M2.max_finite(), 57344.0);
        assert_eq!(Fp8Format::E4M3.max_finite(), 448.0);
        for f in Fp8Format::ALL {
            assert_eq!(f.exponent_bits() + f.mantissa_bits() + 1, 8);
        }
        assert_eq!(Fp8Format::E5M2.bias(), 15);
        assert_eq!(Fp8Format::E4M3.bias(), 7);
    }

    #[test]
    fn zero_and_signed_zero() {
        for f in Fp8Format::ALL {
            assert_eq!(fp8_encode(0.0, f).unwrap(), 0x00);
            assert_eq!(fp8_decode(0x00, f), 0.0);
            assert_eq!(fp8_encode(-0.0, f).unwrap(), 0x80);
            assert!(fp8_decode(0x80, f).is_sign_negative());
            // tiny negatives round to -0
            assert_eq!(fp8_encode(-1e-30, f).unwrap(), 0x80);
        }
    }

    #[test]
    fn e5m2_spot_values() {
        let f = Fp8Format::E5M2;
        assert_eq!(fp8_round(57344.0, f).unwrap(), 57344.0);
        assert_eq!(fp8_round(2500.0, f).unwrap(), 2560.0);
        assert_eq!(fp8_round(1e9, f).unwrap(), 57344.0);
        assert_eq!(fp8_round(-1e9, f).unwrap(), -57344.0);
        assert_eq!(fp8_decode(0x01, f), 2f32.powi(-16));
        assert_eq!(fp8_decode(0x7C, f), f32::INFINITY);
        assert!(fp8_decode(0x7D, f).is_nan());
    }

    #[test]
    fn e4m3_spot_values() {
        let f = Fp8Format::E4M3;
        assert_eq!(fp8_round(448.0, f).unwrap(), 448.0);
        assert_eq!(fp8_round(500.0, f).unwrap(), 448.0);
        assert_eq!(fp8_decode(0x01, f), 2f32.powi(-9));
        assert!(fp8_decode(0x7F, f).is_nan());
        assert!(fp8_decode(0xFF, f).is_nan());
        // 0x7F is the only non-finite magnitude
        assert!(fp8_decode(0x78, f).is_finite());
    }

    #[test]
    fn nan_is_rejected() {
        assert!(fp8_encode(f32::NAN, Fp8Format::E4M3).is_err());
        assert!(fp16_round(f32::NAN).is_err());
    }

    #[test]
    fn ties_go_to_even_mantissa() {
        // E5M2 grid in [1, 2): 1, 1.25, 1.5, 1.75
        let f = Fp8Format::E5M2;
        assert_eq!(fp8_round(1.125, f).unwrap(), 1.0);
        assert_eq!(fp8_round(1.375, f).unwrap(), 1.5);
        // tie across the binade edge rounds up to 2 (mantissa 0 is even)
        assert_eq!(fp8_round(1.875, f).unwrap(), 2.0);
    }

    #[test]
    fn fp16_spot_values() {
        assert_eq!(fp16_round(1.0).unwrap(), 1.0);
        assert_eq!(fp16_round(2049.0).unwrap(), 2048.0);
        assert_eq!(fp16_round(2051.0).unwrap(), 2052.0);
        assert_eq!(fp16_round(FP16_MAX).unwrap(), FP16_MAX);
        assert!(matches!(fp16_round(65505.0), Err(Error::Overflow { .. })));
        // smallest subnormal
        assert_eq!(fp16_round(2f32.powi(-24)).unwrap(), 2f32.powi(-24));
        assert_eq!(fp16_round(2f32.powi(-26)).unwrap(), 0.0);
    }

    #[test]
    fn tensor_rounding_is_idempotent() {
        let x = Tensor::from_vec(vec![0.1, -3.3, 2500.0, 1e-3, 77.7]).unwrap();
        for f in Fp8Format::ALL {
            let once = fp8_quantize_tensor(&x, f).unwrap();
            assert_eq!(fp8_quantize_tensor(&once, f).unwrap(), once);
        }
        let once = fp16_round_tensor(&x).unwrap();
        assert_eq!(fp16_round_tensor(&once).unwrap(), once);
    }
}
