use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qavat::quantization::{mmse_scale, qmax, quantize, QuantConfig, QuantTarget};
use qavat::Tensor;

fn cfg(bits: u32, scale: f64) -> QuantConfig {
    QuantConfig::new(bits, scale, QuantTarget::Weight).unwrap()
}

fn mse(x: &[f64], scale: f64, bits: u32) -> f64 {
    let q = qmax(bits) as f64;
    x.iter().map(|&v| (v - (v / scale).round().clamp(-q, q) * scale).powi(2)).sum::<f64>() / x.len() as f64
}

proptest! {
    #[test]
    fn idempotent(xs in prop::collection::vec(-10.0f64..10.0, 1..64), bits in 2u32..9, scale in 0.01f64..2.0) {
        let c = cfg(bits, scale);
        let t = Tensor::new(vec![xs.len()], xs).unwrap();
        let (codes, once) = quantize(&t, &c).unwrap();
        let (codes2, twice) = quantize(&once, &c).unwrap();
        prop_assert_eq!(codes, codes2);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn symmetric(x in -10.0f64..10.0, bits in 2u32..13, scale in 0.01f64..2.0) {
        let c = cfg(bits, scale);
        prop_assert_eq!(c.code(-x), -c.code(x));
    }

    #[test]
    fn error_bounded_by_half_step_in_range(x in -10.0f64..10.0, bits in 2u32..13, scale in 0.01f64..2.0) {
        let c = cfg(bits, scale);
        let err = (x - c.dequant(c.code(x))).abs();
        if c.in_range(x) {
            prop_assert!(err <= scale / 2.0 * (1.0 + 1e-12));
        } else {
            prop_assert!((c.code(x).abs()) == c.qmax());
            prop_assert!(err <= (x.abs() - c.qmax() as f64 * scale) * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn two_bits_is_ternary(x in -100.0f64..100.0, scale in 0.001f64..10.0) {
        prop_assert!([-1, 0, 1].contains(&cfg(2, scale).code(x)));
    }
}

#[test]
fn two_bit_codes_cover_all_three_levels() {
    let c = cfg(2, 1.0);
    assert_eq!([-3.0, -0.2, 0.4, 0.5, 7.0].map(|x| c.code(x)), [-1, 0, 0, 1, 1]);
}

#[test]
fn mmse_matches_brute_force_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let bits = [2, 3, 4, 6][case % 4];
        let n = 64 + case * 3;
        let heavy = case % 3 == 0;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(-1.0..1.0);
                if heavy {
                    u.signum() * (-(1.0 - u.abs()).max(1e-12).ln())
                } else {
                    u * 2.0
                }
            })
            .collect();
        let amax = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let top = 2.0 * amax / qmax(bits) as f64;
        let best = (1..=100_000).map(|i| mse(&xs, top * i as f64 / 100_000.0, bits)).fold(f64::INFINITY, f64::min);
        let t = Tensor::new(vec![n], xs.clone()).unwrap();
        let got = mse(&xs, mmse_scale(&t, bits).unwrap(), bits);
        assert!(got <= best * 1.01 + 1e-300, "case {case} bits {bits}: mmse {got} vs grid {best}");
    }
}

#[test]
fn rejects_bad_bitwidth_and_scale() {
    assert!(QuantConfig::new(1, 1.0, QuantTarget::Weight).is_err());
    assert!(QuantConfig::new(25, 1.0, QuantTarget::Weight).is_err());
    assert!(QuantConfig::new(4, 0.0, QuantTarget::Weight).is_err());
    assert!(QuantConfig::new(4, f64::NAN, QuantTarget::Weight).is_err());
}

#[test]
fn non_finite_input_is_rejected() {
    let t = Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap();
    assert!(quantize(&t, &cfg(4, 0.1)).is_err());
}
