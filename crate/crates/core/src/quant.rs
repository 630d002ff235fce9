//! Per-tensor uniform affine quantization.
//!
//! A tensor with range `[min, max]` is mapped onto `2^j` evenly spaced grid
//! points with `scale = (max - min) / (2^j - 1)`. Codes are signed,
//! `code = round((v - zero_point) / scale)` with `zero_point = min + 2^(j-1) * scale`,
//! so `min` lands on the lowest code and `max` on the highest. Inference
//! runs on the dequantized reals.

use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{shape, usage, Result};
use crate::math;
use crate::nn::{ArchSpec, FpModel, OpCounts, Prediction};

/// Smallest scale used for constant tensors.
pub const MIN_SCALE: f64 = 1e-12;

/// A quantization level: a bit-width, or full precision (written as 32).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Level {
    Bits(u8),
    Full,
}

impl TryFrom<u8> for Level {
    type Error = crate::Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            32 => Ok(Level::Full),
            2..=8 => Ok(Level::Bits(v)),
            _ => Err(usage!("quantization level must be in 2..=8 or 32, got {v}")),
        }
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        match l {
            Level::Bits(b) => b,
            Level::Full => 32,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Level {
    /// The model this level evaluates: a dequantized proxy, or the model
    /// itself at full precision.
    pub fn proxy(&self, model: &FpModel) -> Result<FpModel> {
        match *self {
            Level::Full => Ok(model.clone()),
            Level::Bits(b) => Ok(dequantize(&quantize_model(model, b)?)),
        }
    }
}

/// Nonempty set of distinct levels, kept in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Level>", into = "Vec<Level>")]
pub struct QuantLevels(Vec<Level>);

impl QuantLevels {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        if levels.is_empty() {
            return Err(usage!("at least one quantization level is required"));
        }
        for (i, l) in levels.iter().enumerate() {
            if levels[..i].contains(l) {
                return Err(usage!("quantization level {l} listed twice"));
            }
        }
        Ok(QuantLevels(levels))
    }

    pub fn as_slice(&self) -> &[Level] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<Level>> for QuantLevels {
    type Error = crate::Error;
    fn try_from(v: Vec<Level>) -> Result<Self> {
        QuantLevels::new(v)
    }
}

impl From<QuantLevels> for Vec<Level> {
    fn from(l: QuantLevels) -> Self {
        l.0
    }
}

pub(crate) fn code_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// One quantized tensor: `value = code * scale + zero_point`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub scale: f64,
    pub zero_point: f64,
    pub codes: Vec<i8>,
}

impl QuantTensor {
    /// Quantize `values` at `bits` with min/max calibration.
    pub fn quantize(values: &[f32], bits: u8) -> Self {
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
        if values.is_empty() || hi <= lo {
            // Constant tensor: every value sits exactly on code 0.
            let zero_point = if values.is_empty() { 0.0 } else { lo };
            return QuantTensor {
                scale: MIN_SCALE,
                zero_point,
                codes: alloc::vec![0; values.len()],
            };
        }
        let levels = ((1u32 << bits) - 1) as f64;
        let scale = ((hi - lo) / levels).max(MIN_SCALE);
        let zero_point = lo + (1u32 << (bits - 1)) as f64 * scale;
        let mut t = QuantTensor {
            scale,
            zero_point,
            codes: Vec::with_capacity(values.len()),
        };
        t.codes = values.iter().map(|&v| t.code_for(v as f64, bits)).collect();
        t
    }

    /// Nearest code on this tensor's grid, clamped to the `bits` range.
    pub fn code_for(&self, v: f64, bits: u8) -> i8 {
        let (lo, hi) = code_range(bits);
        let c = math::round((v - self.zero_point) / self.scale);
        c.clamp(lo as f64, hi as f64) as i8
    }

    pub fn value(&self, i: usize) -> f64 {
        self.value_of(self.codes[i])
    }

    pub fn value_of(&self, code: i8) -> f64 {
        code as f64 * self.scale + self.zero_point
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.codes.iter().map(|&c| self.value_of(c) as f32).collect()
    }
}

/// A model whose parameters are `bit_width`-bit codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub bit_width: u8,
    pub arch: ArchSpec,
    /// One entry per parameter tensor, in `ArchSpec::tensor_slots` order.
    pub tensors: Vec<QuantTensor>,
}

impl QuantModel {
    /// Assemble and validate a quantized model.
    pub fn from_parts(bit_width: u8, arch: ArchSpec, tensors: Vec<QuantTensor>) -> Result<Self> {
        check_bits(bit_width)?;
        arch.validate()?;
        let slots = arch.tensor_slots();
        if slots.len() != tensors.len() {
            return Err(shape!(
                "expected {} quantized tensors, got {}",
                slots.len(),
                tensors.len()
            ));
        }
        let (lo, hi) = code_range(bit_width);
        for (i, (slot, t)) in slots.iter().zip(&tensors).enumerate() {
            if slot.len != t.codes.len() {
                return Err(shape!("tensor {i}: expected {} codes, got {}", slot.len, t.codes.len()));
            }
            if t.codes.iter().any(|&c| (c as i32) < lo || (c as i32) > hi) {
                return Err(usage!("tensor {i}: code outside the {bit_width}-bit range"));
            }
            if !(t.scale > 0.0 && t.scale.is_finite() && t.zero_point.is_finite()) {
                return Err(usage!("tensor {i}: invalid scale or zero point"));
            }
        }
        Ok(QuantModel {
            bit_width,
            arch,
            tensors,
        })
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.bit_width)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.codes.len()).sum()
    }

    /// Prediction with quantized parameters; identical to
    /// `dequantize(self).forward(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        dequantize(self).forward(x)
    }

    pub fn accuracy(&self, examples: &[Example], counts: &mut OpCounts) -> Result<f64> {
        crate::nn::accuracy(&dequantize(self), examples, counts)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(usage!("bit width must be in 2..=8, got {bits}"));
    }
    Ok(())
}

/// Quantize every parameter tensor of `model` at `bits`.
pub fn quantize_model(model: &FpModel, bits: u8) -> Result<QuantModel> {
    check_bits(bits)?;
    Ok(QuantModel {
        bit_width: bits,
        arch: model.arch().clone(),
        tensors: model.params().iter().map(|p| QuantTensor::quantize(p, bits)).collect(),
    })
}

/// Real-valued model with every weight equal to `code * scale + zero_point`.
pub fn dequantize(qm: &QuantModel) -> FpModel {
    FpModel::from_parts(
        qm.arch.clone(),
        qm.tensors.iter().map(QuantTensor::dequantize).collect(),
        0,
        0,
    )
    .expect("a valid quantized model dequantizes to a valid model")
}

pub fn forward_quant(qm: &QuantModel, x: &[f64]) -> Result<Prediction> {
    qm.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use alloc::vec;

    #[test]
    fn bucket_example_maps_to_twenty() {
        // 3-bit grid over [-30, 40] has buckets of width 10.
        let t = QuantTensor::quantize(&[-30.0, 40.0, 17.831], 3);
        assert!((t.scale - 10.0).abs() < 1e-12);
        assert!((t.value(2) - 20.0).abs() < 1e-9);
        // unsigned bucket 0b101 is signed code 1
        assert_eq!(t.codes[2] as i32 + 4, 0b101);
    }

    #[test]
    fn constant_tensor_exact() {
        let t = QuantTensor::quantize(&[0.37; 5], 4);
        assert!(t.codes.iter().all(|&c| c == t.codes[0]));
        assert!(t.dequantize().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn two_bit_identity_scale() {
        let t = QuantTensor {
            scale: 1.0,
            zero_point: 0.0,
            codes: vec![-2, -1, 0, 1],
        };
        assert_eq!(t.dequantize(), vec![-2.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn levels_parse() {
        assert_eq!(Level::try_from(32).unwrap(), Level::Full);
        assert!(Level::try_from(9).is_err());
        assert!(QuantLevels::new(vec![Level::Bits(2), Level::Bits(2)]).is_err());
        assert!(QuantLevels::new(vec![]).is_err());
    }

    #[test]
    fn out_of_range_bits() {
        let m = FpModel::new(ArchSpec::new(vec![LayerSpec::Dense { inputs: 2, outputs: 2 }]), 0).unwrap();
        assert!(quantize_model(&m, 1).is_err());
        assert!(quantize_model(&m, 9).is_err());
    }
}
