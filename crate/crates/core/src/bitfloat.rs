//! IEEE-754 binary32 decoding over relaxed bits.
//!
//! A float is viewed as 32 real-valued "bits" (index 0 is the mantissa LSB,
//! 23..=30 the exponent, 31 the sign). Decoding is written as a smooth
//! expression of those values, so its partial derivative with respect to each
//! bit is defined and serves as that bit's importance. Exponent patterns of
//! all ones never produce `inf`/`NaN`; they are flagged and replaced by a
//! finite surrogate of magnitude `f32::MAX / 33` so gradients stay bounded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANTISSA_BITS: usize = 23;
pub const EXPONENT_BITS: usize = 8;
pub const SIGN_BIT: usize = 31;
pub const EXPONENT_BIAS: i32 = 127;

/// Magnitude substituted for infinities and NaNs.
pub const SPECIAL_SURROGATE: f32 = f32::MAX / 33.0;

/// Lower clamp for gradient-derived bit weights.
pub const GRADIENT_WEIGHT_FLOOR: f64 = 1e-30;

/// XOR a single bit of the binary32 pattern.
#[inline]
pub fn flip_bit(value: f32, bit: u8) -> f32 {
    f32::from_bits(value.to_bits() ^ (1u32 << bit))
}

/// The 32 relaxed bits of one binary32 value.
#[derive(Debug, Clone, PartialEq)]
pub struct BitVector32 {
    pub bits: [f64; 32],
    pub bit_grads: Option<[f64; 32]>,
}

/// Outcome of decoding a (possibly relaxed) bit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeResult {
    pub value: f32,
    pub flag_nan: bool,
    pub flag_inf: bool,
    pub sign: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Zero,
    Normal,
    Special { nan: bool },
}

pub fn encode(value: f32) -> BitVector32 {
    let raw = value.to_bits();
    let mut bits = [0.0f64; 32];
    for (i, b) in bits.iter_mut().enumerate() {
        *b = f64::from((raw >> i) & 1);
    }
    BitVector32 {
        bits,
        bit_grads: None,
    }
}

/// Exact `2^e` for integral `e`, smooth `exp2` otherwise.
fn pow2(e: f64) -> f64 {
    if e.fract() == 0.0 {
        2f64.powi(e as i32)
    } else {
        e.exp2()
    }
}

impl BitVector32 {
    fn hard(&self, i: usize) -> bool {
        self.bits[i] >= 0.5
    }

    fn class(&self) -> Class {
        let exp = SIGN_BIT - EXPONENT_BITS..SIGN_BIT;
        if exp.clone().all(|i| self.hard(i)) {
            let nan = (0..MANTISSA_BITS).any(|i| self.hard(i));
            Class::Special { nan }
        } else if exp.clone().all(|i| !self.hard(i)) {
            Class::Zero
        } else {
            Class::Normal
        }
    }

    fn exponent(&self) -> f64 {
        (0..EXPONENT_BITS)
            .map(|j| self.bits[MANTISSA_BITS + j] * pow2(j as f64))
            .sum()
    }

    fn mantissa(&self) -> f64 {
        (0..MANTISSA_BITS)
            .map(|k| self.bits[k] * pow2(k as f64 - MANTISSA_BITS as f64))
            .sum()
    }

    fn sign_factor(&self) -> f64 {
        1.0 - 2.0 * self.bits[SIGN_BIT]
    }

    /// The decoded value as a smooth function of the relaxed bits.
    ///
    /// The branch (subnormal / normal / special) is selected by rounding the
    /// exponent bits; within a branch the expression is differentiable.
    pub fn relaxed_value(&self) -> f64 {
        let sign = self.sign_factor();
        match self.class() {
            Class::Zero => sign * pow2(1.0 - EXPONENT_BIAS as f64) * self.mantissa(),
            Class::Normal => {
                sign * pow2(self.exponent() - EXPONENT_BIAS as f64) * (1.0 + self.mantissa())
            }
            Class::Special { .. } => sign * f64::from(SPECIAL_SURROGATE),
        }
    }

    /// Bit pattern obtained by rounding every relaxed bit.
    pub fn to_pattern(&self) -> u32 {
        (0..32).fold(0u32, |acc, i| acc | (u32::from(self.hard(i)) << i))
    }
}

pub fn decode(bits: &BitVector32) -> DecodeResult {
    let sign = if bits.hard(SIGN_BIT) { -1 } else { 1 };
    let (flag_nan, flag_inf) = match bits.class() {
        Class::Special { nan } => (nan, !nan),
        _ => (false, false),
    };
    DecodeResult {
        value: bits.relaxed_value() as f32,
        flag_nan,
        flag_inf,
        sign,
    }
}

/// Analytic `d decode / d bit_i` at the concrete pattern of `value`.
pub fn bit_gradients(value: f32) -> Result<[f64; 32]> {
    if !value.is_finite() {
        return Err(Error::Usage(format!(
            "bit gradients need a finite value, got {value}"
        )));
    }
    let bv = encode(value);
    let sign = bv.sign_factor();
    let mut grads = [0.0f64; 32];
    match bv.class() {
        Class::Zero => {
            for (k, g) in grads.iter_mut().enumerate().take(MANTISSA_BITS) {
                *g = sign * pow2(1.0 - EXPONENT_BIAS as f64 + k as f64 - MANTISSA_BITS as f64);
            }
        }
        Class::Normal => {
            let scale = pow2(bv.exponent() - EXPONENT_BIAS as f64);
            let v = f64::from(value);
            for (k, g) in grads.iter_mut().enumerate().take(MANTISSA_BITS) {
                *g = sign * scale * pow2(k as f64 - MANTISSA_BITS as f64);
            }
            for j in 0..EXPONENT_BITS {
                grads[MANTISSA_BITS + j] = v * std::f64::consts::LN_2 * pow2(j as f64);
            }
        }
        Class::Special { .. } => unreachable!("finite values are never special"),
    }
    grads[SIGN_BIT] = -2.0 * f64::from(value).abs();
    Ok(grads)
}

/// How the 32 bit positions of a value are weighted for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitWeightScheme {
    Gradient,
    Exponential,
    Linear,
    Uniform,
}

impl BitWeightScheme {
    pub const ALL: [BitWeightScheme; 4] = [
        BitWeightScheme::Gradient,
        BitWeightScheme::Exponential,
        BitWeightScheme::Linear,
        BitWeightScheme::Uniform,
    ];

    pub fn letter(self) -> char {
        match self {
            BitWeightScheme::Gradient => 'G',
            BitWeightScheme::Exponential => 'E',
            BitWeightScheme::Linear => 'L',
            BitWeightScheme::Uniform => 'R',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.letter() == c)
    }

    /// Whether weights depend on the value being faulted.
    pub fn value_dependent(self) -> bool {
        self == BitWeightScheme::Gradient
    }
}

impl fmt::Display for BitWeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for BitWeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next().and_then(Self::from_letter), chars.next()) {
            (Some(scheme), None) => Ok(scheme),
            _ => Err(Error::Parse(format!(
                "unknown bit scheme {s:?}; expected one of G, E, L, R"
            ))),
        }
    }
}

/// Strictly positive sampling weights for the 32 bit positions of `value`.
pub fn bit_weights(scheme: BitWeightScheme, value: f32) -> Result<[f64; 32]> {
    let mut w = [0.0f64; 32];
    match scheme {
        BitWeightScheme::Uniform => w.fill(1.0),
        BitWeightScheme::Linear => {
            for (i, v) in w.iter_mut().enumerate() {
                *v = (i + 1) as f64;
            }
        }
        BitWeightScheme::Exponential => {
            for (i, v) in w.iter_mut().enumerate() {
                *v = pow2(i as f64);
            }
        }
        BitWeightScheme::Gradient => {
            let g = bit_gradients(value)?;
            for (v, gi) in w.iter_mut().zip(g) {
                *v = gi.abs().max(GRADIENT_WEIGHT_FLOOR);
            }
        }
    }
    Ok(w)
}
