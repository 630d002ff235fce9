use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

/// One layer of an architecture descriptor.
///
/// Convolutions are valid (no padding), stride 1, over a channel-major input
/// of `in_channels * length` values. Their output is flattened channel-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        length: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
}

impl LayerSpec {
    /// Input width, or `None` for width-preserving layers.
    pub fn input_width(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv1d {
                in_channels, length, ..
            } => Some(in_channels * length),
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            LayerSpec::Relu => None,
        }
    }

    pub fn output_width(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Conv1d {
                out_channels,
                kernel,
                length,
                ..
            } => out_channels * (length + 1 - kernel),
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Relu => input,
        }
    }

    /// `(weight_len, bias_len, fan_in)` for parameterised layers.
    pub fn param_shape(&self) -> Option<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((out_channels * in_channels * kernel, out_channels, in_channels * kernel)),
            LayerSpec::Dense { inputs, outputs } => Some((inputs * outputs, outputs, inputs)),
            LayerSpec::Relu => None,
        }
    }

    /// Multiply-accumulates of one forward pass through this layer.
    pub fn forward_macs(&self) -> u64 {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => (out_channels * in_channels * kernel * (length + 1 - kernel)) as u64,
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs) as u64,
            LayerSpec::Relu => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    Weight,
    Bias,
}

/// Location of one parameter tensor inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSlot {
    pub layer: usize,
    pub role: TensorRole,
    pub len: usize,
}

/// Ordered layer list describing a classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        ArchSpec { layers }
    }

    /// Check dimensions and composability; returns `(input_width, classes)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let first = self
            .layers
            .iter()
            .find_map(LayerSpec::input_width)
            .ok_or_else(|| shape!("architecture has no parameterised layer"))?;
        if !matches!(self.layers.first(), Some(l) if l.input_width().is_some()) {
            return Err(shape!("architecture must start with a conv1d or dense layer"));
        }
        let mut width = first;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    length,
                } => {
                    if in_channels == 0 || out_channels == 0 || kernel == 0 || length == 0 {
                        return Err(shape!("layer {i}: conv1d dimensions must be positive"));
                    }
                    if kernel > length {
                        return Err(shape!(
                            "layer {i}: conv1d kernel {kernel} longer than input length {length}"
                        ));
                    }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(shape!("layer {i}: dense dimensions must be positive"));
                    }
                }
                LayerSpec::Relu => {}
            }
            if let Some(expected) = layer.input_width() {
                if expected != width {
                    return Err(shape!(
                        "layer {i}: expects input width {expected} but previous layer emits {width}"
                    ));
                }
            }
            width = layer.output_width(width);
        }
        if width < 2 {
            return Err(shape!("classifier needs at least 2 outputs, got {width}"));
        }
        Ok((first, width))
    }

    pub fn input_width(&self) -> usize {
        self.layers.iter().find_map(LayerSpec::input_width).unwrap_or(0)
    }

    /// Number of classes (output width). Assumes a validated spec.
    pub fn classes(&self) -> usize {
        self.layers.iter().fold(self.input_width(), |w, l| l.output_width(w))
    }

    /// Parameter tensors in storage order: weight then bias of every
    /// parameterised layer.
    pub fn tensor_slots(&self) -> Vec<TensorSlot> {
        let mut slots = Vec::new();
        for (layer, spec) in self.layers.iter().enumerate() {
            if let Some((w, b, _)) = spec.param_shape() {
                slots.push(TensorSlot {
                    layer,
                    role: TensorRole::Weight,
                    len: w,
                });
                slots.push(TensorSlot {
                    layer,
                    role: TensorRole::Bias,
                    len: b,
                });
            }
        }
        slots
    }

    pub fn param_count(&self) -> usize {
        self.tensor_slots().iter().map(|s| s.len).sum()
    }

    pub fn forward_macs(&self) -> u64 {
        self.layers.iter().map(LayerSpec::forward_macs).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn conv_then_dense_composes() {
        let arch = ArchSpec::new(vec![
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                length: 8,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 12, outputs: 3 },
        ]);
        assert_eq!(arch.validate().unwrap(), (8, 3));
        assert_eq!(arch.param_count(), 6 + 2 + 36 + 3);
    }

    #[test]
    fn mismatched_dense_is_rejected() {
        let arch = ArchSpec::new(vec![
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                length: 8,
            },
            LayerSpec::Dense { inputs: 16, outputs: 3 },
        ]);
        let err = arch.validate().unwrap_err();
        assert!(matches!(err, crate::Error::Shape(ref m) if m.contains("width 16")));
    }

    #[test]
    fn leading_relu_is_rejected() {
        let arch = ArchSpec::new(vec![LayerSpec::Relu, LayerSpec::Dense { inputs: 4, outputs: 3 }]);
        assert!(arch.validate().is_err());
    }
}
