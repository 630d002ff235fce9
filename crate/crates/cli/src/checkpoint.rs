//! Binary checkpoints.
//!
//! Full precision (`QCFP`):
//!
//! ```text
//! magic "QCFP" | version u32 | layer count u32 | layers
//! epoch u64 | seed u64 | tensor count u32 | per tensor: len u32, len x f32
//! ```
//!
//! Quantized (`QCQM`):
//!
//! ```text
//! magic "QCQM" | version u32 | bit width u8 | kind u8 | target bits u8 | layer count u32 | layers
//! tensor count u32 | per tensor: scale f64, zero point f64, len u32, len x i8
//! ```
//!
//! A layer is a kind byte (0 conv1d, 1 dense, 2 relu) followed by four u32
//! dimensions, unused ones zero. Integers and reals are little-endian. The
//! quantized kind is 0 for a classifier and 1 for a bit-flipping network, in
//! which case the target bits name the bit width of the model it serves.

use qcore::bitflip::BitFlipNet;
use qcore::nn::{ArchSpec, FpModel, LayerSpec};
use qcore::quant::{QuantModel, QuantTensor};

pub const VERSION: u32 = 1;

/// What a quantized checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    Model,
    BitFlip { target_bits: u8 },
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn arch(&mut self, arch: &ArchSpec) {
        self.u32(arch.layers.len());
        for layer in &arch.layers {
            let (kind, dims) = match *layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    length,
                } => (0, [in_channels, out_channels, kernel, length]),
                LayerSpec::Dense { inputs, outputs } => (1, [inputs, outputs, 0, 0]),
                LayerSpec::Relu => (2, [0; 4]),
            };
            self.u8(kind);
            for d in dims {
                self.u32(d);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), String> {
        if self.take(4)? != magic {
            return Err(format!("not a {} checkpoint", String::from_utf8_lossy(magic)));
        }
        let version = self.u32()?;
        if version != VERSION as usize {
            return Err(format!("unsupported version {version}"));
        }
        Ok(())
    }

    fn arch(&mut self) -> Result<ArchSpec, String> {
        let n = self.u32()?;
        let mut layers = Vec::new();
        for i in 0..n {
            let kind = self.u8()?;
            let d = [self.u32()?, self.u32()?, self.u32()?, self.u32()?];
            layers.push(match kind {
                0 => LayerSpec::Conv1d {
                    in_channels: d[0],
                    out_channels: d[1],
                    kernel: d[2],
                    length: d[3],
                },
                1 => LayerSpec::Dense {
                    inputs: d[0],
                    outputs: d[1],
                },
                2 => LayerSpec::Relu,
                k => return Err(format!("layer {i}: unknown kind {k}")),
            });
        }
        Ok(ArchSpec::new(layers))
    }

    fn finish(&self) -> Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_fp(model: &FpModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(b"QCFP");
    w.u32(VERSION as usize);
    w.arch(model.arch());
    w.u64(model.epoch_count);
    w.u64(model.rng_seed);
    w.u32(model.params().len());
    for t in model.params() {
        w.u32(t.len());
        for v in t {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

pub fn decode_fp(bytes: &[u8]) -> Result<FpModel, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(b"QCFP")?;
    let arch = r.arch()?;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let n = r.u32()?;
    let mut params = Vec::new();
    for _ in 0..n {
        let len = r.u32()?;
        let raw = r.take(len.checked_mul(4).ok_or("tensor too large")?)?;
        params.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    r.finish()?;
    FpModel::from_parts(arch, params, epoch, seed).map_err(|e| e.to_string())
}

pub fn encode_quant(qm: &QuantModel, kind: QuantKind) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(b"QCQM");
    w.u32(VERSION as usize);
    w.u8(qm.bit_width);
    match kind {
        QuantKind::Model => {
            w.u8(0);
            w.u8(qm.bit_width);
        }
        QuantKind::BitFlip { target_bits } => {
            w.u8(1);
            w.u8(target_bits);
        }
    }
    w.arch(&qm.arch);
    w.u32(qm.tensors.len());
    for t in &qm.tensors {
        w.f64(t.scale);
        w.f64(t.zero_point);
        w.u32(t.codes.len());
        w.0.extend(t.codes.iter().map(|&c| c as u8));
    }
    w.0
}

pub fn decode_quant(bytes: &[u8]) -> Result<(QuantModel, QuantKind), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(b"QCQM")?;
    let bits = r.u8()?;
    let kind = match (r.u8()?, r.u8()?) {
        (0, _) => QuantKind::Model,
        (1, target_bits) => QuantKind::BitFlip { target_bits },
        (k, _) => return Err(format!("unknown checkpoint kind {k}")),
    };
    let arch = r.arch()?;
    let n = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..n {
        let scale = r.f64()?;
        let zero_point = r.f64()?;
        let len = r.u32()?;
        let codes = r.take(len)?.iter().map(|&b| b as i8).collect();
        tensors.push(QuantTensor {
            scale,
            zero_point,
            codes,
        });
    }
    r.finish()?;
    let qm = QuantModel::from_parts(bits, arch, tensors).map_err(|e| e.to_string())?;
    Ok((qm, kind))
}

pub fn encode_bitflip(net: &BitFlipNet) -> Vec<u8> {
    encode_quant(
        net.quant(),
        QuantKind::BitFlip {
            target_bits: net.target_bits(),
        },
    )
}

pub fn decode_bitflip(bytes: &[u8]) -> Result<BitFlipNet, String> {
    match decode_quant(bytes)? {
        (qm, QuantKind::BitFlip { target_bits }) => BitFlipNet::from_quant(qm, target_bits).map_err(|e| e.to_string()),
        (_, QuantKind::Model) => Err("holds a classifier, not a bit-flipping network".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qcore::quant::quantize_model;

    fn arch() -> ArchSpec {
        ArchSpec::new(vec![
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                length: 6,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 8, outputs: 3 },
        ])
    }

    #[test]
    fn fp_round_trip() {
        let m = FpModel::new(arch(), 7).unwrap();
        let bytes = encode_fp(&m);
        assert_eq!(&bytes[..4], b"QCFP");
        let back = decode_fp(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_fp(&back), bytes);
    }

    #[test]
    fn quant_round_trip() {
        let m = FpModel::new(arch(), 3).unwrap();
        for bits in [2, 4, 8] {
            let qm = quantize_model(&m, bits).unwrap();
            let bytes = encode_quant(&qm, QuantKind::Model);
            let (back, kind) = decode_quant(&bytes).unwrap();
            assert_eq!(back, qm);
            assert_eq!(kind, QuantKind::Model);
        }
    }

    #[test]
    fn bitflip_tag_survives() {
        let net = BitFlipNet::constant(1, 8, 4).unwrap();
        let back = decode_bitflip(&encode_bitflip(&net)).unwrap();
        assert_eq!(back, net);
        assert!(decode_bitflip(&encode_quant(net.quant(), QuantKind::Model)).is_err());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode_fp(&FpModel::new(arch(), 1).unwrap());
        assert!(decode_fp(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_fp(b"QCQM\x01\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_fp(&extra).is_err());
    }
}
