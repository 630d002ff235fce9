use alloc::vec;
use alloc::vec::Vec;
use rand_distr::{Distribution, Uniform};

use super::arch::{ArchSpec, LayerSpec};
use super::ops::OpCounts;
use crate::error::{numeric, shape, Result};
use crate::math;
use crate::rng;

/// Softmax output for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Argmax of `probabilities`, lowest index on ties.
    pub label: usize,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probabilities: Vec<f64> = logits.iter().map(|&z| math::exp(z - max)).collect();
        let total: f64 = probabilities.iter().sum();
        for p in &mut probabilities {
            *p /= total;
        }
        let label = argmax(&probabilities);
        Prediction { probabilities, label }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Activations recorded by a forward pass: `activations[0]` is the input and
/// `activations[i + 1]` is the output of layer `i`. The last entry holds the
/// logits.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Full-precision classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FpModel {
    arch: ArchSpec,
    /// Weight and bias of every parameterised layer, in `ArchSpec::tensor_slots` order.
    params: Vec<Vec<f32>>,
    pub epoch_count: u64,
    pub rng_seed: u64,
}

impl FpModel {
    /// Build a model with weights and biases drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[rng::INIT]);
        let mut params = Vec::new();
        for spec in &arch.layers {
            if let Some((w, b, fan_in)) = spec.param_shape() {
                let bound = (1.0 / math::sqrt(fan_in as f64)) as f32;
                let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| numeric!("init distribution: {e}"))?;
                params.push((0..w).map(|_| dist.sample(&mut rng)).collect());
                params.push((0..b).map(|_| dist.sample(&mut rng)).collect());
            }
        }
        Ok(FpModel {
            arch,
            params,
            epoch_count: 0,
            rng_seed: seed,
        })
    }

    /// Assemble a model from explicit tensors.
    pub fn from_parts(arch: ArchSpec, params: Vec<Vec<f32>>, epoch_count: u64, rng_seed: u64) -> Result<Self> {
        arch.validate()?;
        let slots = arch.tensor_slots();
        if slots.len() != params.len() {
            return Err(shape!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            ));
        }
        for (i, (slot, p)) in slots.iter().zip(&params).enumerate() {
            if slot.len != p.len() {
                return Err(shape!("tensor {i}: expected {} values, got {}", slot.len, p.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(numeric!("tensor {i} holds a non-finite value"));
            }
        }
        Ok(FpModel {
            arch,
            params,
            epoch_count,
            rng_seed,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.arch.input_width()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Softmax prediction for one example. Pure.
    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        self.forward_counted(x, &mut OpCounts::default())
    }

    pub fn forward_counted(&self, x: &[f64], counts: &mut OpCounts) -> Result<Prediction> {
        let trace = self.forward_trace(x, counts)?;
        Ok(Prediction::from_logits(trace.logits()))
    }

    /// Forward pass keeping every intermediate activation.
    pub fn forward_trace(&self, x: &[f64], counts: &mut OpCounts) -> Result<Trace> {
        let width = self.input_width();
        if x.len() != width {
            return Err(shape!("input has {} features, model expects {width}", x.len()));
        }
        let mut activations = Vec::with_capacity(self.arch.layers.len() + 1);
        activations.push(x.to_vec());
        let mut tensor = 0;
        for spec in &self.arch.layers {
            let input = activations.last().expect("input pushed above");
            let out = match *spec {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    length,
                } => {
                    let (w, b) = (&self.params[tensor], &self.params[tensor + 1]);
                    tensor += 2;
                    let out_len = length + 1 - kernel;
                    let mut out = vec![0.0; out_channels * out_len];
                    for o in 0..out_channels {
                        for p in 0..out_len {
                            let mut acc = b[o] as f64;
                            for c in 0..in_channels {
                                let wrow = &w[(o * in_channels + c) * kernel..][..kernel];
                                let xrow = &input[c * length + p..][..kernel];
                                for (wv, xv) in wrow.iter().zip(xrow) {
                                    acc += *wv as f64 * xv;
                                }
                            }
                            out[o * out_len + p] = acc;
                        }
                    }
                    out
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let (w, b) = (&self.params[tensor], &self.params[tensor + 1]);
                    tensor += 2;
                    (0..outputs)
                        .map(|o| {
                            w[o * inputs..][..inputs]
                                .iter()
                                .zip(input)
                                .fold(b[o] as f64, |acc, (wv, xv)| acc + *wv as f64 * xv)
                        })
                        .collect()
                }
                LayerSpec::Relu => input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            };
            counts.macs += spec.forward_macs();
            activations.push(out);
        }
        counts.forward_passes += 1;
        Ok(Trace { activations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(inputs: usize, outputs: usize) -> ArchSpec {
        ArchSpec::new(vec![LayerSpec::Dense { inputs, outputs }])
    }

    #[test]
    fn same_seed_same_model() {
        let a = FpModel::new(dense(4, 3), 7).unwrap();
        let b = FpModel::new(dense(4, 3), 7).unwrap();
        assert_eq!(a, b);
        let bits = |m: &FpModel| -> Vec<u32> { m.params().iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, FpModel::new(dense(4, 3), 8).unwrap());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = FpModel::new(dense(4, 3), 7).unwrap();
        // 1/sqrt(4) = 0.5
        for v in m.params().iter().flatten() {
            assert!(v.abs() <= 0.5, "{v}");
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = FpModel::from_parts(dense(4, 3), vec![vec![0.0; 12], vec![0.0; 3]], 0, 0).unwrap();
        let p = m.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        for q in &p.probabilities {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.label, 0);
    }

    #[test]
    fn amplified_logit_wins() {
        let mut w = vec![0.0; 12];
        w[2 * 4] = 5.0; // class 2 reads feature 0
        let m = FpModel::from_parts(dense(4, 3), vec![w, vec![0.0; 3]], 0, 0).unwrap();
        assert_eq!(m.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap().label, 2);
    }

    #[test]
    fn input_width_mismatch() {
        let m = FpModel::new(dense(4, 3), 1).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn from_parts_rejects_nan() {
        let r = FpModel::from_parts(dense(1, 2), vec![vec![f32::NAN, 0.0], vec![0.0; 2]], 0, 0);
        assert!(matches!(r, Err(crate::Error::Numeric(_))));
    }
}
