//! Integer export and the `LICQ` model file.
//!
//! ```text
//! magic "LICQ" | u16 version
//! u32 stages, channels, kernel, stride | f64 lambda | u32 layer count | u32 encoder_len
//! per layer:
//!   u8 kind, u8 activation, u32 in, out, kernel, stride, pad, out_pad
//!   f64 s_w, s_in, s_out | i32 qmin, qmax
//!   weight bytes (i8, declaration order) | i32 bias per output channel
//! u32 latent channels | f64 mu[C] | f64 log_b[C]
//! per latent channel: i32 smin, smax | u8 escape | u32 cum[slots + 1]
//! ```
//! Little-endian throughout.

use sha2::{Digest, Sha256};

use super::{fake_quant_range, quantize_input, QuantContext, LATENT_QMAX, WEIGHT_QMAX};
use crate::codec::{Activation, ConvLayer, FactorizedPrior, LayerKind, LicConfig, LicModel};
use crate::entropy::{CdfTable, ChannelCdf};
use crate::error::{format_err, invalid, Error, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::nn::{conv2d, conv_transpose2d, round_half_away};
use crate::tensor::Tensor;

pub const QUANT_MAGIC: &[u8; 4] = b"LICQ";
pub const QUANT_VERSION: u16 = 1;
const WHAT: &str = "LICQ model";
const MAX_DIM: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct QLayer {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub activation: Activation,
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
    pub s_w: f64,
    pub s_in: f64,
    pub s_out: f64,
    pub qmin: i32,
    pub qmax: i32,
}

impl QLayer {
    pub fn weight_shape(&self) -> [usize; 4] {
        ConvLayer::weight_shape(self.kind, self.in_ch, self.out_ch, self.kernel)
    }

    pub fn dequantized_weight(&self) -> Tensor {
        let data = self.weight.iter().map(|&q| q as f64 * self.s_w).collect();
        Tensor::new(self.weight_shape().to_vec(), data).expect("shape checked at construction")
    }

    pub fn dequantized_bias(&self) -> Tensor {
        let step = self.s_w * self.s_in;
        let data = self.bias.iter().map(|&q| q as f64 * step).collect();
        Tensor::new(vec![self.out_ch], data).expect("shape checked at construction")
    }

    /// Float simulation of this layer on an already-quantized input.
    pub fn simulate(&self, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (self.dequantized_weight(), self.dequantized_bias());
        let pre = match self.kind {
            LayerKind::Conv => conv2d(x, &w, &b, self.stride, self.pad)?,
            LayerKind::ConvTranspose => conv_transpose2d(x, &w, &b, self.stride, self.pad, self.out_pad)?,
        };
        let (lo, hi) = (self.qmin as f64, self.qmax as f64);
        Ok(pre.map(|v| fake_quant_range(v, self.s_out, lo, hi)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: LicConfig,
    pub encoder_len: usize,
    pub layers: Vec<QLayer>,
    pub prior: FactorizedPrior,
    pub cdf: CdfTable,
}

/// Weight payload sizes before and after quantization.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SizeReport {
    /// Weights and biases as 32-bit floats.
    pub float_payload_bytes: usize,
    /// INT8 weights plus INT32 biases.
    pub int_payload_bytes: usize,
    pub file_bytes: usize,
}

impl SizeReport {
    pub fn shrink(&self) -> f64 {
        self.float_payload_bytes as f64 / self.int_payload_bytes as f64
    }
}

impl QuantizedModel {
    /// Freezes the fine-tuned weights and scales into integers. Latent CDF
    /// ranges cover the latents observed on `calibration` and the prior's bulk.
    pub fn export(model: &LicModel, ctx: &QuantContext, calibration: &[Tensor]) -> Result<Self> {
        if ctx.layers.len() != model.layers.len() {
            return Err(invalid("quantization context does not match model"));
        }
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, (l, q)) in model.layers.iter().zip(&ctx.layers).enumerate() {
            let s_w = q.weight_scale();
            let (lo, hi) = (-(WEIGHT_QMAX as f64), WEIGHT_QMAX as f64);
            let weight = l
                .weight
                .value
                .data()
                .iter()
                .map(|&t| super::quantize_value(t, s_w, lo, hi) as i8)
                .collect();
            let step = s_w * q.s_in;
            let bias = l
                .bias
                .value
                .data()
                .iter()
                .map(|&b| {
                    let v = round_half_away(b / step);
                    if v.abs() > i32::MAX as f64 {
                        Err(Error::Overflow {
                            layer: i,
                            detail: format!("bias {b} needs {v} steps of {step:e}, beyond int32"),
                        })
                    } else {
                        Ok(v as i32)
                    }
                })
                .collect::<Result<_>>()?;
            layers.push(QLayer {
                kind: l.kind,
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                kernel: l.kernel,
                stride: l.stride,
                pad: l.pad,
                out_pad: l.out_pad,
                activation: l.activation,
                weight,
                bias,
                s_w,
                s_in: q.s_in,
                s_out: q.out.scale,
                qmin: q.out.qmin,
                qmax: q.out.qmax,
            });
        }
        let mut qm = QuantizedModel {
            config: model.config.clone(),
            encoder_len: model.encoder_len,
            layers,
            prior: model.prior.clone(),
            cdf: CdfTable { channels: Vec::new() },
        };
        let c = qm.latent_channels();
        let mut ranges: Vec<(i32, i32)> = (0..c)
            .map(|ch| {
                let (mu, b) = (qm.prior.location(ch), qm.prior.scale(ch));
                ((mu - 8.0 * b).floor() as i32, (mu + 8.0 * b).ceil() as i32)
            })
            .collect();
        for x in calibration {
            let z = qm.simulate_encoder(x)?;
            let (_, _, h, w) = z.dims4()?;
            for (i, &v) in z.data().iter().enumerate() {
                let ch = (i / (h * w)) % c;
                ranges[ch].0 = ranges[ch].0.min(v as i32);
                ranges[ch].1 = ranges[ch].1.max(v as i32);
            }
        }
        for r in &mut ranges {
            r.0 = r.0.clamp(-LATENT_QMAX, LATENT_QMAX);
            r.1 = r.1.clamp(r.0, LATENT_QMAX);
        }
        qm.cdf = CdfTable::freeze(&qm.prior, &ranges)?;
        Ok(qm)
    }

    pub fn latent_channels(&self) -> usize {
        self.layers[self.encoder_len - 1].out_ch
    }

    pub fn encoder_layers(&self) -> &[QLayer] {
        &self.layers[..self.encoder_len]
    }

    pub fn decoder_layers(&self) -> &[QLayer] {
        &self.layers[self.encoder_len..]
    }

    /// Float simulation of every layer output (the fake-quant reference path).
    pub fn simulate(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = quantize_input(x);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.simulate(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn simulate_encoder(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = quantize_input(x);
        for l in self.encoder_layers() {
            h = l.simulate(&h)?;
        }
        Ok(h)
    }

    pub fn simulate_decoder(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for l in self.decoder_layers() {
            h = l.simulate(&h)?;
        }
        Ok(h)
    }

    /// Float model carrying the dequantized weights.
    pub fn dequantize(&self) -> Result<LicModel> {
        let mut m = LicModel::new(self.config.clone(), 0)?;
        m.layers = self
            .layers
            .iter()
            .map(|q| ConvLayer {
                kind: q.kind,
                in_ch: q.in_ch,
                out_ch: q.out_ch,
                kernel: q.kernel,
                stride: q.stride,
                pad: q.pad,
                out_pad: q.out_pad,
                activation: q.activation,
                weight: crate::nn::Parameter::new(q.dequantized_weight()),
                bias: crate::nn::Parameter::new(q.dequantized_bias()),
            })
            .collect();
        m.encoder_len = self.encoder_len;
        m.prior = self.prior.clone();
        m.pruned = true;
        Ok(m)
    }

    pub fn size_report(&self) -> SizeReport {
        let (w, b): (usize, usize) = self
            .layers
            .iter()
            .fold((0, 0), |(w, b), l| (w + l.weight.len(), b + l.bias.len()));
        SizeReport {
            float_payload_bytes: 4 * (w + b),
            int_payload_bytes: w + 4 * b,
            file_bytes: self.to_bytes().len(),
        }
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        let c = &self.config;
        w.bytes(QUANT_MAGIC).u16(QUANT_VERSION);
        w.usize32(c.stages).usize32(c.channels).usize32(c.kernel).usize32(c.stride).f64(c.lambda);
        w.usize32(self.layers.len()).usize32(self.encoder_len);
        for l in &self.layers {
            w.u8(match l.kind {
                LayerKind::Conv => 0,
                LayerKind::ConvTranspose => 1,
            });
            w.u8(match l.activation {
                Activation::Relu => 0,
                Activation::Identity => 1,
                Activation::Clamp01 => 2,
            });
            for v in [l.in_ch, l.out_ch, l.kernel, l.stride, l.pad, l.out_pad] {
                w.usize32(v);
            }
            w.f64(l.s_w).f64(l.s_in).f64(l.s_out).i32(l.qmin).i32(l.qmax);
            for &q in &l.weight {
                w.u8(q as u8);
            }
            for &b in &l.bias {
                w.i32(b);
            }
        }
        w.usize32(self.prior.channels());
        for &v in self.prior.mu.value.data() {
            w.f64(v);
        }
        for &v in self.prior.log_b.value.data() {
            w.f64(v);
        }
        for ch in &self.cdf.channels {
            w.i32(ch.smin).i32(ch.smax).u8(u8::from(ch.escape));
            w.usize32(ch.cumulative().len());
            for &v in ch.cumulative() {
                w.u32(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| format_err(WHAT, d.to_string());
        let mut r = ByteReader::new(WHAT, bytes);
        r.magic(QUANT_MAGIC)?;
        r.version(QUANT_VERSION)?;
        let config = LicConfig {
            stages: r.dim(64)?,
            channels: r.dim(MAX_DIM)?,
            kernel: r.dim(64)?,
            stride: r.dim(64)?,
            lambda: r.f64()?,
        };
        config.validate().map_err(|e| bad(&e.to_string()))?;
        let n = r.dim(128)?;
        let encoder_len = r.dim(n)?;
        if encoder_len >= n {
            return Err(bad("model has no decoder"));
        }
        let mut layers: Vec<QLayer> = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = match r.u8()? {
                0 => LayerKind::Conv,
                1 => LayerKind::ConvTranspose,
                _ => return Err(bad("unknown layer kind")),
            };
            let activation = match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Identity,
                2 => Activation::Clamp01,
                _ => return Err(bad("unknown activation")),
            };
            let in_ch = r.dim(MAX_DIM)?;
            let out_ch = r.dim(MAX_DIM)?;
            let kernel = r.dim(64)?;
            let stride = r.dim(64)?;
            let pad = r.usize32()?;
            let out_pad = r.usize32()?;
            if pad >= kernel || out_pad >= stride {
                return Err(bad("inconsistent padding"));
            }
            let s_w = r.f64()?;
            let s_in = r.f64()?;
            let s_out = r.f64()?;
            if [s_w, s_in, s_out].iter().any(|s| *s <= 0.0) {
                return Err(bad("scales must be positive"));
            }
            let qmin = r.i32()?;
            let qmax = r.i32()?;
            if qmin >= qmax {
                return Err(bad("empty output range"));
            }
            if let Some(prev) = layers.last() {
                if prev.out_ch != in_ch {
                    return Err(bad("layer channel counts do not chain"));
                }
            }
            let count = in_ch * out_ch * kernel * kernel;
            let weight = r.take(count)?.iter().map(|&b| b as i8).collect::<Vec<_>>();
            if weight.contains(&i8::MIN) {
                return Err(bad("weight -128 is outside the symmetric grid"));
            }
            let bias = (0..out_ch).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
            layers.push(QLayer {
                kind,
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                out_pad,
                activation,
                weight,
                bias,
                s_w,
                s_in,
                s_out,
                qmin,
                qmax,
            });
        }
        let c = r.dim(MAX_DIM)?;
        if c != layers[encoder_len - 1].out_ch {
            return Err(bad("prior channel count differs from the latent"));
        }
        let prior = FactorizedPrior::from_values(r.f64_vec(c)?, r.f64_vec(c)?)?;
        let mut channels = Vec::with_capacity(c);
        for _ in 0..c {
            let smin = r.i32()?;
            let smax = r.i32()?;
            let escape = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(bad("escape flag must be 0 or 1")),
            };
            let len = r.dim(1 << 17)?;
            let cum = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            channels.push(ChannelCdf::from_cumulative(smin, smax, escape, cum).map_err(|e| bad(&e.to_string()))?);
        }
        r.finish()?;
        Ok(QuantizedModel {
            config,
            encoder_len,
            layers,
            prior,
            cdf: CdfTable { channels },
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::codec::{FloatHooks, LatentMode};
    use crate::nn::Graph;
    use crate::quantizer::calibrate;

    fn setup() -> (LicModel, QuantContext, Vec<Tensor>) {
        let model = LicModel::new(
            LicConfig {
                stages: 2,
                channels: 6,
                ..LicConfig::default()
            },
            5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let imgs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let stats = calibrate(&model, &imgs).unwrap();
        let ctx = QuantContext::new(&model, &stats).unwrap();
        (model, ctx, imgs)
    }

    #[test]
    fn fake_quant_graph_matches_dequantized_forward_exactly() {
        let (model, ctx, imgs) = setup();
        let qm = QuantizedModel::export(&model, &ctx, &imgs).unwrap();
        for x in &imgs {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let hooks = ctx.hooks(&mut g, false);
            let xv = g.constant(quantize_input(x));
            let f = model.forward_graph(&mut g, &bound, xv, LatentMode::Round, &hooks).unwrap();
            let sim = qm.simulate(x).unwrap();
            assert_eq!(g.value(f.latent_hat).data(), sim[qm.encoder_len - 1].data());
            assert_eq!(g.value(f.recon).data(), sim.last().unwrap().data());
        }
    }

    #[test]
    fn grid_aligned_weights_dequantize_exactly() {
        let (mut model, ctx, imgs) = setup();
        for (l, q) in model.layers.iter_mut().zip(&ctx.layers) {
            let s = q.weight_scale();
            let snapped = l.weight.value.map(|t| super::super::fake_quant(t, s));
            l.weight.value = snapped;
        }
        let qm = QuantizedModel::export(&model, &ctx, &imgs).unwrap();
        for (l, q) in model.layers.iter().zip(&qm.layers) {
            assert_eq!(l.weight.value.data(), q.dequantized_weight().data());
        }
        let dq = qm.dequantize().unwrap();
        let mut g = Graph::new();
        let b = dq.bind(&mut g);
        let xv = g.constant(quantize_input(&imgs[0]));
        assert!(dq.forward_graph(&mut g, &b, xv, LatentMode::Round, &FloatHooks).is_ok());
    }

    #[test]
    fn licq_round_trip_and_size() {
        let (model, ctx, imgs) = setup();
        let qm = QuantizedModel::export(&model, &ctx, &imgs).unwrap();
        let bytes = qm.to_bytes();
        assert_eq!(&bytes[..4], b"LICQ");
        let back = QuantizedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, qm);
        assert_eq!(back.hash(), qm.hash());
        assert!(qm.size_report().shrink() >= 3.0);
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(matches!(QuantizedModel::from_bytes(&v), Err(Error::UnsupportedVersion { .. })));
        assert!(QuantizedModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn bias_overflow_names_layer() {
        let (mut model, ctx, imgs) = setup();
        model.layers[1].bias.value.data_mut()[0] = 1e12;
        match QuantizedModel::export(&model, &ctx, &imgs) {
            Err(Error::Overflow { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }
}
