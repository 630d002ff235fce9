//! Gradient-free calibration with a bit-flipping network.
//!
//! During a recorded run of back-propagation calibration every parameter
//! yields one training pair per epoch: the change `w * a - a` its current
//! value would make to its mean input activation `a`, and the direction its
//! code then moved. A tiny classifier learns to map the first to the second.
//! At deployment that classifier alone nudges codes by at most one step per
//! epoch.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::coreset::CalibrationStep;
use crate::data::Example;
use crate::error::{numeric, usage, Result};
use crate::math;
use crate::nn::{loss_and_gradients, train_epoch_on, ArchSpec, FpModel, LayerSpec, OpCounts, Prediction, TrainConfig};
use crate::quant::{dequantize, quantize_model, QuantModel};
use crate::rng;

/// Hidden units of the bit-flipping network.
pub const HIDDEN: usize = 8;

/// Deployment-time calibration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Bit-flip epochs per stream batch.
    pub epochs: u32,
    /// Smallest code change recorded as a flip.
    pub flip_threshold: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            epochs: 5,
            flip_threshold: 0.5,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.flip_threshold > 0.0 && self.flip_threshold.is_finite()) {
            return Err(usage!("flip threshold must be positive"));
        }
        Ok(())
    }
}

/// One parameter in one recorded epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub epoch: u32,
    pub tensor: usize,
    pub index: usize,
    /// `w * a - a` at the start of the epoch.
    pub delta_a: f64,
    /// Direction of the code change over the epoch, in {-1, 0, 1}.
    pub delta_p: i8,
}

/// Direction label of a code change.
pub fn flip_label(code_change: i32, threshold: f64) -> i8 {
    if ((code_change.unsigned_abs()) as f64) < threshold {
        0
    } else {
        code_change.signum() as i8
    }
}

/// Mean input activation seen by each parameter over `data`, aligned with
/// the model's tensors. Convolution weights average over output positions;
/// biases see a constant 1.
pub fn input_activations(model: &FpModel, data: &[Example], counts: &mut OpCounts) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(usage!("input activations of an empty set"));
    }
    let layers = &model.arch().layers;
    let mut sums: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.input_width().unwrap_or(0)]).collect();
    for ex in data {
        let trace = model.forward_trace(&ex.features, counts)?;
        for (li, layer) in layers.iter().enumerate() {
            if !matches!(layer, LayerSpec::Relu) {
                for (s, v) in sums[li].iter_mut().zip(&trace.activations[li]) {
                    *s += v;
                }
            }
        }
    }
    let n = data.len() as f64;
    let mut out = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        let mean: Vec<f64> = sums[li].iter().map(|s| s / n).collect();
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                out.push((0..outputs).flat_map(|_| mean.iter().copied()).collect::<Vec<_>>());
                debug_assert_eq!(out.last().map(Vec::len), Some(inputs * outputs));
                out.push(vec![1.0; outputs]);
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => {
                let out_len = length + 1 - kernel;
                let mut per = Vec::with_capacity(in_channels * kernel);
                for c in 0..in_channels {
                    for t in 0..kernel {
                        let s: f64 = (0..out_len).map(|p| mean[c * length + p + t]).sum();
                        per.push(s / out_len as f64);
                    }
                }
                out.push((0..out_channels).flat_map(|_| per.iter().copied()).collect());
                out.push(vec![1.0; out_channels]);
            }
            LayerSpec::Relu => {}
        }
    }
    Ok(out)
}

/// Straight-through back-propagation calibration of a quantized model.
///
/// Gradients are taken at the dequantized weights and applied to real-valued
/// shadow weights, which are clamped to the tensor's grid and rounded back to
/// codes after every batch. The grid (scale and zero point) never moves.
#[derive(Debug, Clone)]
pub struct SteCalibrator {
    cfg: TrainConfig,
    latent: Option<Vec<Vec<f64>>>,
    epoch: u64,
}

impl SteCalibrator {
    pub fn new(cfg: TrainConfig) -> Self {
        SteCalibrator {
            cfg,
            latent: None,
            epoch: 0,
        }
    }

    fn sync(&mut self, qm: &QuantModel) {
        let stale = match &self.latent {
            None => true,
            Some(latent) => qm.tensors.iter().zip(latent).any(|(t, l)| {
                t.codes.len() != l.len() || t.codes.iter().zip(l).any(|(&c, &v)| t.code_for(v, qm.bit_width) != c)
            }),
        };
        if stale {
            self.latent = Some(
                qm.tensors
                    .iter()
                    .map(|t| t.codes.iter().map(|&c| t.value_of(c)).collect())
                    .collect(),
            );
        }
    }

    /// One epoch of mini-batch SGD over `data`. Returns the mean loss.
    pub fn epoch(&mut self, qm: &mut QuantModel, data: &[Example], counts: &mut OpCounts) -> Result<f64> {
        use rand::seq::SliceRandom;
        self.cfg.validate()?;
        if data.is_empty() {
            return Err(usage!("cannot calibrate on an empty set"));
        }
        self.sync(qm);
        let (lo, hi) = qm.code_range();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[rng::SHUFFLE, self.epoch]));
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let fp = dequantize(qm);
            let (loss, grads) = loss_and_gradients(&fp, &batch, None, counts)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(numeric!("non-finite loss or gradient during calibration"));
            }
            total += loss * chunk.len() as f64;
            let latent = self.latent.as_mut().expect("synced above");
            for ((t, l), g) in qm.tensors.iter_mut().zip(latent.iter_mut()).zip(&grads.tensors) {
                let (min, max) = (
                    t.value_of(lo as i8) - t.scale / 2.0,
                    t.value_of(hi as i8) + t.scale / 2.0,
                );
                for ((c, v), gv) in t.codes.iter_mut().zip(l.iter_mut()).zip(g) {
                    *v = (*v - self.cfg.learning_rate * gv).clamp(min, max);
                    *c = t_code(t.scale, t.zero_point, *v, lo, hi);
                }
            }
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }
}

fn t_code(scale: f64, zero_point: f64, v: f64, lo: i32, hi: i32) -> i8 {
    math::round((v - zero_point) / scale).clamp(lo as f64, hi as f64) as i8
}

impl CalibrationStep for SteCalibrator {
    fn step(&mut self, qm: &mut QuantModel, data: &[Example], counts: &mut OpCounts) -> Result<()> {
        self.epoch(qm, data, counts).map(|_| ())
    }
}

/// Run `cfg.epochs` epochs of straight-through calibration on `core`,
/// recording one [`DeltaRecord`] per parameter per epoch. Returns the
/// calibrated model and the records, epoch-major.
pub fn record_calibration(
    qm: &QuantModel,
    core: &[Example],
    cfg: &TrainConfig,
    flip_threshold: f64,
    counts: &mut OpCounts,
) -> Result<(QuantModel, Vec<DeltaRecord>)> {
    if core.is_empty() {
        return Err(usage!("cannot record calibration on an empty coreset"));
    }
    let mut model = qm.clone();
    let mut ste = SteCalibrator::new(cfg.clone());
    let mut records = Vec::with_capacity(cfg.epochs as usize * qm.param_count());
    for epoch in 0..cfg.epochs {
        let acts = input_activations(&dequantize(&model), core, counts)?;
        let before = model.clone();
        ste.epoch(&mut model, core, counts)?;
        for (ti, (t0, t1)) in before.tensors.iter().zip(&model.tensors).enumerate() {
            for (i, &a) in acts[ti].iter().enumerate().take(t0.codes.len()) {
                records.push(DeltaRecord {
                    epoch,
                    tensor: ti,
                    index: i,
                    delta_a: t0.value(i) * a - a,
                    delta_p: flip_label(t1.codes[i] as i32 - t0.codes[i] as i32, flip_threshold),
                });
            }
        }
    }
    Ok((model, records))
}

/// A quantized three-way classifier from `delta_a` to a code step.
#[derive(Debug, Clone, PartialEq)]
pub struct BitFlipNet {
    net: QuantModel,
    /// Dequantized parameters, in tensor order.
    w: [Vec<f64>; 4],
    target_bits: u8,
}

impl BitFlipNet {
    /// Layer layout shared by every bit-flipping network.
    pub fn arch() -> ArchSpec {
        ArchSpec::new(vec![
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: HIDDEN,
                kernel: 1,
                length: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: HIDDEN,
                outputs: 3,
            },
        ])
    }

    /// Wrap a quantized network serving models of `target_bits` bits.
    pub fn from_quant(net: QuantModel, target_bits: u8) -> Result<Self> {
        if net.arch != Self::arch() {
            return Err(crate::error::shape!("bit-flipping network has an unexpected layout"));
        }
        if !(2..=8).contains(&target_bits) {
            return Err(usage!("target bit width must be in 2..=8, got {target_bits}"));
        }
        let fp = dequantize(&net);
        let p = fp.params();
        let w = core::array::from_fn(|i| p[i].iter().map(|&v| v as f64).collect());
        Ok(BitFlipNet { net, w, target_bits })
    }

    /// A network that always answers `step`.
    pub fn constant(step: i8, net_bits: u8, target_bits: u8) -> Result<Self> {
        if !(-1..=1).contains(&step) {
            return Err(usage!("step must be -1, 0 or 1"));
        }
        let arch = Self::arch();
        let mut params: Vec<Vec<f32>> = arch.tensor_slots().iter().map(|s| vec![0.0; s.len]).collect();
        params[3][(step + 1) as usize] = 1.0;
        let fp = FpModel::from_parts(arch, params, 0, 0)?;
        Self::from_quant(quantize_model(&fp, net_bits)?, target_bits)
    }

    pub fn quant(&self) -> &QuantModel {
        &self.net
    }

    pub fn target_bits(&self) -> u8 {
        self.target_bits
    }

    /// Predicted code step for one parameter.
    ///
    /// Same arithmetic as the engine's forward pass, without building a
    /// trace; queries run once per parameter per epoch.
    pub fn predict(&self, delta_a: f64, counts: &mut OpCounts) -> i8 {
        let [w0, b0, w1, b1] = &self.w;
        let mut hidden = [0.0; HIDDEN];
        for (o, h) in hidden.iter_mut().enumerate() {
            let v = b0[o] + w0[o] * delta_a;
            *h = if v > 0.0 { v } else { 0.0 };
        }
        let mut logits = [0.0; 3];
        for (c, logit) in logits.iter_mut().enumerate() {
            *logit = w1[c * HIDDEN..][..HIDDEN]
                .iter()
                .zip(&hidden)
                .fold(b1[c], |acc, (w, h)| acc + w * h);
        }
        counts.macs += (HIDDEN + 3 * HIDDEN) as u64;
        counts.forward_passes += 1;
        Prediction::from_logits(&logits).label as i8 - 1
    }
}

/// Result of fitting a bit-flipping network.
#[derive(Debug, Clone)]
pub struct BitFlipTraining {
    pub net: BitFlipNet,
    /// Accuracy of the quantized network on its own records.
    pub train_accuracy: f64,
    /// Records labelled -1, 0 and 1.
    pub class_counts: [u64; 3],
    pub warnings: Vec<String>,
}

/// Fit a bit-flipping network on `records` with class-balanced cross-entropy
/// and quantize it to `net_bits`. Inputs are standardised during training and
/// the standardisation is folded into the first layer.
pub fn train_bitflip(
    records: &[DeltaRecord],
    net_bits: u8,
    target_bits: u8,
    cfg: &TrainConfig,
    counts: &mut OpCounts,
) -> Result<BitFlipTraining> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(usage!("no calibration records to train on"));
    }
    if let Some(r) = records
        .iter()
        .find(|r| !r.delta_a.is_finite() || !(-1..=1).contains(&r.delta_p))
    {
        return Err(usage!("invalid record for tensor {} index {}", r.tensor, r.index));
    }
    let mut class_counts = [0u64; 3];
    for r in records {
        class_counts[(r.delta_p + 1) as usize] += 1;
    }
    let present: Vec<usize> = (0..3).filter(|&c| class_counts[c] > 0).collect();
    let mut warnings = Vec::new();
    if present.len() == 1 {
        let step = present[0] as i8 - 1;
        warnings.push(format!("every record has step {step}; using a constant network"));
        return Ok(BitFlipTraining {
            net: BitFlipNet::constant(step, net_bits, target_bits)?,
            train_accuracy: 1.0,
            class_counts,
            warnings,
        });
    }

    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.delta_a).sum::<f64>() / n;
    let var = records
        .iter()
        .map(|r| (r.delta_a - mean) * (r.delta_a - mean))
        .sum::<f64>()
        / n;
    let sd = math::sqrt(var).max(1e-12);
    let examples: Vec<Example> = records
        .iter()
        .enumerate()
        .map(|(i, r)| Example {
            id: i as u64,
            features: vec![(r.delta_a - mean) / sd],
            label: (r.delta_p + 1) as usize,
        })
        .collect();
    let weights: Vec<f64> = class_counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (present.len() as f64 * c as f64)
            }
        })
        .collect();

    let seed = rng::derive(cfg.seed, &[rng::BITFLIP]);
    let mut fp = FpModel::new(BitFlipNet::arch(), seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.clone() };
    for _ in 0..cfg.epochs {
        train_epoch_on(&mut fp, &examples, &train_cfg, Some(&weights), counts)?;
    }

    // Fold the standardisation into the first layer.
    let mut params = fp.params().to_vec();
    let (w, b) = params.split_at_mut(1);
    for (w, b) in w[0].iter_mut().zip(b[0].iter_mut()).take(HIDDEN) {
        let wf = *w as f64;
        *w = (wf / sd) as f32;
        *b = (*b as f64 - wf * mean / sd) as f32;
    }
    let folded = FpModel::from_parts(BitFlipNet::arch(), params, fp.epoch_count, seed)?;
    let net = BitFlipNet::from_quant(quantize_model(&folded, net_bits)?, target_bits)?;
    let mut hits = 0usize;
    for r in records {
        if net.predict(r.delta_a, counts) == r.delta_p {
            hits += 1;
        }
    }
    Ok(BitFlipTraining {
        net,
        train_accuracy: hits as f64 / n,
        class_counts,
        warnings,
    })
}

/// Coreset members followed by batch examples not already in the coreset.
pub fn calibration_set(core: &[Example], batch: &[Example]) -> Vec<Example> {
    let mut seen = BTreeSet::new();
    core.iter()
        .chain(batch)
        .filter(|e| seen.insert(e.id))
        .cloned()
        .collect()
}

fn bf_epoch(qm: &mut QuantModel, bf: &BitFlipNet, data: &[Example], counts: &mut OpCounts) -> Result<()> {
    let acts = input_activations(&dequantize(qm), data, counts)?;
    let (lo, hi) = qm.code_range();
    for (t, a) in qm.tensors.iter_mut().zip(&acts) {
        for (i, &a) in a.iter().enumerate().take(t.codes.len()) {
            let w = t.value(i);
            let step = bf.predict(w * a - a, counts);
            t.codes[i] = (t.codes[i] as i32 + step as i32).clamp(lo, hi) as i8;
        }
    }
    Ok(())
}

/// Calibrate `qm` on `data` with the bit-flipping network only: every epoch
/// each code moves by the network's predicted step. No gradients are taken.
pub fn bf_calibrate(
    qm: &QuantModel,
    bf: &BitFlipNet,
    data: &[Example],
    cfg: &CalibrationConfig,
    counts: &mut OpCounts,
) -> Result<QuantModel> {
    bf_calibrate_traced(qm, bf, data, cfg, counts, &mut |_, _| Ok(()))
}

/// [`bf_calibrate`] calling `on_epoch(epoch, model)` after every epoch.
pub fn bf_calibrate_traced(
    qm: &QuantModel,
    bf: &BitFlipNet,
    data: &[Example],
    cfg: &CalibrationConfig,
    counts: &mut OpCounts,
    on_epoch: &mut dyn FnMut(u32, &QuantModel) -> Result<()>,
) -> Result<QuantModel> {
    cfg.validate()?;
    if bf.target_bits != qm.bit_width {
        return Err(usage!(
            "bit-flipping network serves {}-bit models, got a {}-bit model",
            bf.target_bits,
            qm.bit_width
        ));
    }
    if data.is_empty() {
        return Err(usage!("cannot calibrate on an empty set"));
    }
    let mut model = qm.clone();
    for epoch in 0..cfg.epochs {
        bf_epoch(&mut model, bf, data, counts)?;
        on_epoch(epoch + 1, &model)?;
    }
    Ok(model)
}

/// One bit-flip epoch as a [`CalibrationStep`].
pub struct BitFlipCalibrator<'a> {
    pub net: &'a BitFlipNet,
}

impl CalibrationStep for BitFlipCalibrator<'_> {
    fn step(&mut self, qm: &mut QuantModel, data: &[Example], counts: &mut OpCounts) -> Result<()> {
        if self.net.target_bits != qm.bit_width {
            return Err(usage!("bit-flipping network does not match the model's bit width"));
        }
        bf_epoch(qm, self.net, data, counts)
    }
}
