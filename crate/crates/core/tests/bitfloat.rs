mod common;

use common::rng;
use faultline::bitfloat::{
    bit_gradients, bit_weights, decode, encode, flip_bit, BitWeightScheme, EXPONENT_BITS,
    MANTISSA_BITS, SIGN_BIT, SPECIAL_SURROGATE,
};
use proptest::prelude::*;
use rand::Rng;

fn random_finite(r: &mut impl Rng) -> f32 {
    loop {
        let v = f32::from_bits(r.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn curated() -> Vec<f32> {
    vec![
        0.0,
        -0.0,
        f32::from_bits(1),
        -f32::from_bits(1),
        f32::from_bits(0x007F_FFFF),
        f32::MIN_POSITIVE,
        f32::MAX,
        f32::MIN,
        1.0,
        f32::from_bits(1.0f32.to_bits() + 1),
        f32::from_bits(1.0f32.to_bits() - 1),
        -1.0,
    ]
}

#[test]
fn decode_inverts_encode_bit_exactly() {
    let mut r = rng(1);
    let values: Vec<f32> = curated()
        .into_iter()
        .chain((0..100_000).map(|_| random_finite(&mut r)))
        .collect();
    for v in values {
        let d = decode(&encode(v));
        assert_eq!(d.value.to_bits(), v.to_bits(), "{v:e}");
        assert!(!d.flag_inf && !d.flag_nan);
        assert_eq!(d.sign, if v.is_sign_negative() { -1 } else { 1 });
    }
}

#[test]
fn encode_matches_ieee_layout() {
    let mut r = rng(2);
    for _ in 0..10_000 {
        let v = random_finite(&mut r);
        let bv = encode(v);
        assert_eq!(bv.to_pattern(), v.to_bits());
        assert!(bv.bits.iter().all(|&b| b == 0.0 || b == 1.0));
    }
}

#[test]
fn analytic_bit_gradients_match_finite_differences() {
    let eps = 1e-4;
    let mut r = rng(3);
    for n in 0..10_000 {
        let v = random_finite(&mut r);
        let analytic = bit_gradients(v).unwrap();
        let mut bv = encode(v);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = bv.bits[i];
            // step inward from the concrete 0/1 value, both sides stay in the same rounding class
            bv.bits[i] = orig + eps;
            let up = bv.relaxed_value();
            bv.bits[i] = orig - eps;
            let down = bv.relaxed_value();
            bv.bits[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let ok = (a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()) || a == numeric;
            assert!(
                ok,
                "value {v:e} (#{n}) bit {i}: analytic {a:e} numeric {numeric:e}"
            );
        }
    }
}

#[test]
fn closed_form_gradients_at_one() {
    let g = bit_gradients(1.0).unwrap();
    assert_eq!(g[22], 0.5);
    for j in 0..EXPONENT_BITS {
        assert_eq!(
            g[MANTISSA_BITS + j],
            std::f64::consts::LN_2 * 2f64.powi(j as i32)
        );
    }
    assert_eq!(g[SIGN_BIT], -2.0);
}

#[test]
fn special_patterns_decode_to_flagged_finite_surrogates() {
    let mut r = rng(4);
    for sign in [0u32, 1] {
        let inf = (sign << 31) | 0x7F80_0000;
        let d = decode(&encode(f32::from_bits(inf)));
        assert!(d.flag_inf && !d.flag_nan);
        assert_eq!(d.value.abs(), f32::MAX / 33.0);
        assert_eq!(d.value.abs(), SPECIAL_SURROGATE);
        for _ in 0..64 {
            let mantissa = r.random_range(1u32..1 << 23);
            let d = decode(&encode(f32::from_bits(inf | mantissa)));
            assert!(d.flag_nan && !d.flag_inf);
            assert!(d.value.is_finite());
        }
    }
}

#[test]
fn bit_gradients_reject_non_finite() {
    assert!(bit_gradients(f32::INFINITY).is_err());
    assert!(bit_gradients(f32::NAN).is_err());
}

#[test]
fn linear_and_exponential_scheme_constants() {
    let lin = bit_weights(BitWeightScheme::Linear, 1.0).unwrap();
    assert_eq!((lin[0], lin[31]), (1.0, 32.0));
    let exp = bit_weights(BitWeightScheme::Exponential, 1.0).unwrap();
    assert_eq!(exp[31], 2f64.powi(31));
    assert_eq!(exp[30] * 2.0, exp[31]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn flips_are_involutive(v in any::<u32>(), bit in 0u8..32) {
        let x = f32::from_bits(v);
        prop_assert_eq!(flip_bit(flip_bit(x, bit), bit).to_bits(), v);
        prop_assert_eq!(flip_bit(x, bit).to_bits(), v ^ (1 << bit));
    }

    #[test]
    fn decode_is_always_finite(v in any::<u32>()) {
        let d = decode(&encode(f32::from_bits(v)));
        prop_assert!(d.value.is_finite());
        prop_assert!(!(d.flag_inf && d.flag_nan));
    }

    #[test]
    fn weights_are_strictly_positive_and_finite(v in any::<u32>()) {
        let x = f32::from_bits(v);
        prop_assume!(x.is_finite());
        for scheme in BitWeightScheme::ALL {
            let w = bit_weights(scheme, x).unwrap();
            prop_assert!(w.iter().all(|&w| w > 0.0 && w.is_finite()));
        }
    }

    #[test]
    fn gradient_mantissa_weights_double_per_bit(x in 1e-20f32..1e30) {
        let w = bit_weights(BitWeightScheme::Gradient, x).unwrap();
        for k in 0..MANTISSA_BITS - 1 {
            prop_assert_eq!(w[k + 1], 2.0 * w[k]);
        }
    }
}
