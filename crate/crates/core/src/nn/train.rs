use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::LayerSpec;
use super::model::{FpModel, Prediction, Trace};
use super::ops::OpCounts;
use crate::data::{Dataset, Example};
use crate::error::{numeric, shape, usage, Result};
use crate::math;
use crate::rng;

/// SGD hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(usage!("learning rate must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(usage!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(usage!("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Per-tensor gradients, aligned with [`FpModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &FpModel) -> Self {
        Gradients {
            tensors: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

fn check_labels(model: &FpModel, batch: &[&Example]) -> Result<()> {
    let classes = model.classes();
    for ex in batch {
        if ex.label >= classes {
            return Err(usage!(
                "example {} has label {} but the model has {classes} classes",
                ex.id,
                ex.label
            ));
        }
    }
    Ok(())
}

/// Accumulate the gradient of `scale * loss` for one traced example, given
/// the gradient of the loss with respect to the logits.
fn backprop(model: &FpModel, trace: &Trace, dlogits: Vec<f64>, grads: &mut Gradients, counts: &mut OpCounts) {
    let arch = model.arch();
    let params = model.params();
    let mut tensor = params.len();
    let mut delta = dlogits;
    for (li, spec) in arch.layers.iter().enumerate().rev() {
        let input = &trace.activations[li];
        let need_input_grad = li > 0;
        match *spec {
            LayerSpec::Dense { inputs, outputs } => {
                tensor -= 2;
                let w = &params[tensor];
                let mut din = vec![0.0; if need_input_grad { inputs } else { 0 }];
                let (gw, gb) = split_pair(&mut grads.tensors, tensor);
                for o in 0..outputs {
                    let d = delta[o];
                    gb[o] += d;
                    let row = &mut gw[o * inputs..][..inputs];
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                    if need_input_grad {
                        for (di, wv) in din.iter_mut().zip(&w[o * inputs..][..inputs]) {
                            *di += d * *wv as f64;
                        }
                    }
                }
                counts.macs += (inputs * outputs * if need_input_grad { 2 } else { 1 }) as u64;
                delta = din;
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => {
                tensor -= 2;
                let w = &params[tensor];
                let out_len = length + 1 - kernel;
                let mut din = vec![0.0; if need_input_grad { in_channels * length } else { 0 }];
                let (gw, gb) = split_pair(&mut grads.tensors, tensor);
                for o in 0..out_channels {
                    for p in 0..out_len {
                        let d = delta[o * out_len + p];
                        gb[o] += d;
                        for c in 0..in_channels {
                            let base = (o * in_channels + c) * kernel;
                            for t in 0..kernel {
                                gw[base + t] += d * input[c * length + p + t];
                                if need_input_grad {
                                    din[c * length + p + t] += d * w[base + t] as f64;
                                }
                            }
                        }
                    }
                }
                let macs = (out_channels * in_channels * kernel * out_len) as u64;
                counts.macs += if need_input_grad { 2 * macs } else { macs };
                delta = din;
            }
            LayerSpec::Relu => {
                for (d, x) in delta.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
    }
    counts.gradient_calls += 1;
}

fn split_pair(tensors: &mut [Vec<f64>], at: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = tensors[at..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

/// Mean (optionally class-weighted) cross-entropy over `batch` and its
/// gradient. Weighted means divide by the summed weights of the batch.
pub fn loss_and_gradients(
    model: &FpModel,
    batch: &[&Example],
    class_weights: Option<&[f64]>,
    counts: &mut OpCounts,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(usage!("cannot compute gradients of an empty batch"));
    }
    check_labels(model, batch)?;
    let weight_of = |label: usize| class_weights.map_or(1.0, |w| w[label]);
    let total_weight: f64 = batch.iter().map(|ex| weight_of(ex.label)).sum();
    if !(total_weight > 0.0) {
        return Err(numeric!("class weights of the batch sum to {total_weight}"));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for ex in batch {
        let trace = model.forward_trace(&ex.features, counts)?;
        let pred = Prediction::from_logits(trace.logits());
        let scale = weight_of(ex.label) / total_weight;
        loss -= scale * math::ln(pred.probabilities[ex.label]);
        let mut dlogits = pred.probabilities;
        dlogits[ex.label] -= 1.0;
        for d in &mut dlogits {
            *d *= scale;
        }
        backprop(model, &trace, dlogits, &mut grads, counts);
    }
    Ok((loss, grads))
}

/// Gradients of the mean cross-entropy over `batch`, without updating.
pub fn backward_stats(model: &FpModel, batch: &[Example]) -> Result<Gradients> {
    let refs: Vec<&Example> = batch.iter().collect();
    let (_, grads) = loss_and_gradients(model, &refs, None, &mut OpCounts::default())?;
    if !grads.is_finite() {
        return Err(numeric!("non-finite gradient"));
    }
    Ok(grads)
}

/// Mean cross-entropy of the model over `examples`.
pub fn mean_loss(model: &FpModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(usage!("mean loss of an empty set"));
    }
    let mut total = 0.0;
    for ex in examples {
        let p = model.forward(&ex.features)?;
        if ex.label >= p.probabilities.len() {
            return Err(usage!("example {} has out-of-range label {}", ex.id, ex.label));
        }
        total -= math::ln(p.probabilities[ex.label]);
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of `examples` whose argmax prediction matches the label.
pub fn accuracy(model: &FpModel, examples: &[Example], counts: &mut OpCounts) -> Result<f64> {
    if examples.is_empty() {
        return Err(usage!("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for ex in examples {
        if model.forward_counted(&ex.features, counts)?.label == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// One SGD epoch over a dataset. Returns the mean training loss.
pub fn train_epoch(model: &mut FpModel, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if data.num_classes > model.classes() {
        return Err(shape!(
            "dataset has {} classes, model emits {}",
            data.num_classes,
            model.classes()
        ));
    }
    train_epoch_on(model, &data.examples, cfg, None, &mut OpCounts::default())
}

/// One SGD epoch over `examples` in an order drawn from `cfg.seed` and the
/// model's epoch counter. Returns the mean of the pre-update batch losses,
/// weighted by batch size.
pub fn train_epoch_on(
    model: &mut FpModel,
    examples: &[Example],
    cfg: &TrainConfig,
    class_weights: Option<&[f64]>,
    counts: &mut OpCounts,
) -> Result<f64> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(usage!("cannot train on an empty dataset"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng::stream(cfg.seed, &[rng::SHUFFLE, model.epoch_count]);
    order.shuffle(&mut rng);

    let mut total = 0.0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let (loss, grads) = loss_and_gradients(model, &batch, class_weights, counts)?;
        if !loss.is_finite() {
            return Err(numeric!("non-finite loss in batch {bi}"));
        }
        if !grads.is_finite() {
            return Err(numeric!("non-finite gradient in batch {bi}"));
        }
        total += loss * chunk.len() as f64;
        for (p, g) in model.params_mut().iter_mut().zip(&grads.tensors) {
            for (w, gv) in p.iter_mut().zip(g) {
                *w = (*w as f64 - cfg.learning_rate * gv) as f32;
                if !w.is_finite() {
                    return Err(numeric!("weight became non-finite in batch {bi}"));
                }
            }
        }
    }
    model.epoch_count += 1;
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;

    fn ex(id: u64, features: &[f64], label: usize) -> Example {
        Example {
            id,
            features: features.to_vec(),
            label,
        }
    }

    fn dense(inputs: usize, outputs: usize) -> ArchSpec {
        ArchSpec::new(vec![LayerSpec::Dense { inputs, outputs }])
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut m = FpModel::new(dense(2, 2), 3).unwrap();
        let before = m.clone();
        let data: Vec<Example> = (0..10)
            .map(|i| ex(i, &[i as f64 * 0.1, 1.0 - i as f64 * 0.2], (i % 2) as usize))
            .collect();
        let pre = mean_loss(&m, &data).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 3,
            seed: 1,
        };
        let loss = train_epoch_on(&mut m, &data, &cfg, None, &mut OpCounts::default()).unwrap();
        assert_eq!(m.params(), before.params());
        assert!((loss - pre).abs() < 1e-12);
        assert_eq!(m.epoch_count, 1);
    }

    #[test]
    fn empty_data_is_usage_error() {
        let mut m = FpModel::new(dense(2, 2), 3).unwrap();
        let r = train_epoch_on(&mut m, &[], &TrainConfig::default(), None, &mut OpCounts::default());
        assert!(matches!(r, Err(crate::Error::Usage(_))));
    }

    #[test]
    fn duplicate_example_has_mean_semantics() {
        let m = FpModel::new(dense(3, 2), 5).unwrap();
        let a = ex(0, &[0.3, -1.0, 2.0], 1);
        let one = backward_stats(&m, std::slice::from_ref(&a)).unwrap();
        let two = backward_stats(&m, &[a.clone(), a]).unwrap();
        for (x, y) in one.tensors.iter().flatten().zip(two.tensors.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_inputs_cancel_bias_gradient() {
        let m = FpModel::from_parts(dense(2, 2), vec![vec![0.0; 4], vec![0.0; 2]], 0, 0).unwrap();
        let batch = [ex(0, &[1.0, 0.0], 0), ex(1, &[0.0, 1.0], 1)];
        let g = backward_stats(&m, &batch).unwrap();
        // p = 1/2 everywhere: class 0 bias sees (1/2 - 1) + 1/2 = 0.
        assert!(g.tensors[1].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let m = FpModel::new(dense(2, 2), 0).unwrap();
        assert!(backward_stats(&m, &[ex(0, &[0.0, 0.0], 5)]).is_err());
    }

    #[test]
    fn exploding_step_is_numeric_error() {
        let mut m = FpModel::new(dense(1, 2), 0).unwrap();
        // Opposite labels on one huge input: one of them has probability 0.
        let data = [ex(0, &[1e300], 0), ex(1, &[1e300], 1)];
        let cfg = TrainConfig {
            learning_rate: 1.0,
            epochs: 1,
            batch_size: 1,
            seed: 0,
        };
        let mut result = Ok(0.0);
        for _ in 0..4 {
            result = train_epoch_on(&mut m, &data, &cfg, None, &mut OpCounts::default());
            if result.is_err() {
                break;
            }
        }
        assert!(
            matches!(result, Err(crate::Error::Numeric(ref msg)) if msg.contains("batch")),
            "{result:?}"
        );
    }
}
