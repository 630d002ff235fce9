use proptest::prelude::*;
use qcore::nn::{ArchSpec, FpModel, LayerSpec};
use qcore::quant::{dequantize, quantize_model, QuantTensor};
use qcore::rng;
use rand::Rng;

#[test]
fn three_bit_bucket_of_width_ten() {
    let t = QuantTensor::quantize(&[-30.0, 40.0, 17.831], 3);
    assert!((t.scale - 10.0).abs() < 1e-12);
    assert_eq!(t.codes[2], 1);
    assert!((t.value(2) - 20.0).abs() < 1e-9);
    // Unsigned bucket index of the same grid.
    assert_eq!(t.codes[2] as i32 + 4, 0b101);
}

#[test]
fn reconstruction_within_half_a_step() {
    for bits in [2u8, 4, 8] {
        let mut rng = rng::stream(bits as u64, &[1]);
        let values: Vec<f32> = (0..1000).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let t = QuantTensor::quantize(&values, bits);
        for (i, &v) in values.iter().enumerate() {
            let err = (t.value(i) - v as f64).abs();
            assert!(
                err <= t.scale / 2.0 + 1e-9,
                "{bits} bits: {v} -> {} (scale {})",
                t.value(i),
                t.scale
            );
        }
    }
}

fn tensor_strategy() -> impl Strategy<Value = (Vec<f32>, u8)> {
    (prop::collection::vec(-100.0f32..100.0, 1..64), 2u8..=8)
}

proptest! {
    #[test]
    fn codes_stay_in_range((values, bits) in tensor_strategy()) {
        let t = QuantTensor::quantize(&values, bits);
        let half = 1i32 << (bits - 1);
        for &c in &t.codes {
            prop_assert!((-half..half).contains(&(c as i32)));
        }
    }

    #[test]
    fn in_range_error_bounded((values, bits) in tensor_strategy()) {
        let t = QuantTensor::quantize(&values, bits);
        for (i, &v) in values.iter().enumerate() {
            prop_assert!((t.value(i) - v as f64).abs() <= t.scale / 2.0 + 1e-9);
        }
    }

    #[test]
    fn order_preserving((values, bits) in tensor_strategy(), probe in prop::collection::vec(-200.0f64..200.0, 2..20)) {
        let t = QuantTensor::quantize(&values, bits);
        let mut probe = probe;
        probe.sort_by(f64::total_cmp);
        for w in probe.windows(2) {
            prop_assert!(t.code_for(w[0], bits) <= t.code_for(w[1], bits));
        }
    }

    #[test]
    fn out_of_range_clamps((values, bits) in tensor_strategy()) {
        let t = QuantTensor::quantize(&values, bits);
        let half = 1i32 << (bits - 1);
        prop_assert_eq!(t.code_for(1e9, bits) as i32, half - 1);
        prop_assert_eq!(t.code_for(-1e9, bits) as i32, -half);
    }

    #[test]
    fn requantizing_keeps_codes(seed in 0u64..1000, bits in 2u8..=8) {
        let arch = ArchSpec::new(vec![
            LayerSpec::Conv1d { in_channels: 1, out_channels: 2, kernel: 3, length: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 12, outputs: 3 },
        ]);
        let qm = quantize_model(&FpModel::new(arch, seed).unwrap(), bits).unwrap();
        let again = quantize_model(&dequantize(&qm), bits).unwrap();
        for (a, b) in qm.tensors.iter().zip(&again.tensors) {
            prop_assert_eq!(&a.codes, &b.codes);
        }
    }

    #[test]
    fn quantized_forward_equals_dequantized(seed in 0u64..1000, bits in 2u8..=8, x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let arch = ArchSpec::new(vec![LayerSpec::Dense { inputs: 4, outputs: 3 }]);
        let qm = quantize_model(&FpModel::new(arch, seed).unwrap(), bits).unwrap();
        prop_assert_eq!(qm.forward(&x).unwrap(), dequantize(&qm).forward(&x).unwrap());
    }
}
