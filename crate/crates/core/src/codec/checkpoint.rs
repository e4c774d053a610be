//! `LICF` float checkpoint.
//!
//! ```text
//! magic "LICF" | u16 version | u32 stages, channels, kernel, stride | f64 lambda
//! u8 flags (bit0 pruned, bit1 mask present) | u32 layer count | u32 encoder_len
//! per layer: u8 kind, u8 activation, u32 in, out, kernel, stride, pad, out_pad
//! [mask: per layer, out_ch bytes of 0/1]
//! f64 parameters in declaration order (weight, bias per layer; prior mu, log_b)
//! ```
//! All integers and reals are little-endian.

use super::{Activation, ConvLayer, FactorizedPrior, LayerKind, LicConfig, LicModel};
use crate::error::{format_err, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::nn::Parameter;
use crate::pruner::ChannelMask;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LICF";
pub const CHECKPOINT_VERSION: u16 = 1;
const WHAT: &str = "LICF checkpoint";
const MAX_DIM: usize = 1 << 16;

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Conv => 0,
        LayerKind::ConvTranspose => 1,
    }
}

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
        Activation::Clamp01 => 2,
    }
}

impl LicModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        let c = &self.config;
        w.bytes(CHECKPOINT_MAGIC).u16(CHECKPOINT_VERSION);
        w.usize32(c.stages).usize32(c.channels).usize32(c.kernel).usize32(c.stride).f64(c.lambda);
        let flags = u8::from(self.pruned) | (u8::from(self.mask.is_some()) << 1);
        w.u8(flags).usize32(self.layers.len()).usize32(self.encoder_len);
        for l in &self.layers {
            w.u8(kind_code(l.kind)).u8(act_code(l.activation));
            for v in [l.in_ch, l.out_ch, l.kernel, l.stride, l.pad, l.out_pad] {
                w.usize32(v);
            }
        }
        if let Some(mask) = &self.mask {
            for keep in &mask.keep {
                for &k in keep {
                    w.u8(u8::from(k));
                }
            }
        }
        for p in self.params() {
            for &v in p.value.data() {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(WHAT, bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let config = LicConfig {
            stages: r.dim(64)?,
            channels: r.dim(MAX_DIM)?,
            kernel: r.dim(64)?,
            stride: r.dim(64)?,
            lambda: r.f64()?,
        };
        config.validate().map_err(|e| format_err(WHAT, e.to_string()))?;
        let flags = r.u8()?;
        if flags > 3 {
            return Err(format_err(WHAT, format!("unknown flags {flags:#x}")));
        }
        let n_layers = r.dim(128)?;
        let encoder_len = r.dim(n_layers)?;
        if encoder_len >= n_layers {
            return Err(format_err(WHAT, "model has no decoder"));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let kind = match r.u8()? {
                0 => LayerKind::Conv,
                1 => LayerKind::ConvTranspose,
                k => return Err(format_err(WHAT, format!("unknown layer kind {k}"))),
            };
            let activation = match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Identity,
                2 => Activation::Clamp01,
                a => return Err(format_err(WHAT, format!("unknown activation {a}"))),
            };
            let in_ch = r.dim(MAX_DIM)?;
            let out_ch = r.dim(MAX_DIM)?;
            let kernel = r.dim(64)?;
            let stride = r.dim(64)?;
            let pad = r.usize32()?;
            let out_pad = r.usize32()?;
            if pad >= kernel || out_pad >= stride {
                return Err(format_err(WHAT, "inconsistent padding"));
            }
            shapes.push((kind, activation, in_ch, out_ch, kernel, stride, pad, out_pad));
        }
        for pair in shapes.windows(2) {
            if pair[0].3 != pair[1].2 {
                return Err(format_err(WHAT, "layer channel counts do not chain"));
            }
        }
        let mask = if flags & 2 != 0 {
            let mut keep = Vec::with_capacity(n_layers);
            for s in &shapes {
                let row = r.take(s.3)?;
                if row.iter().any(|&b| b > 1) {
                    return Err(format_err(WHAT, "mask bytes must be 0 or 1"));
                }
                keep.push(row.iter().map(|&b| b == 1).collect());
            }
            Some(ChannelMask { keep })
        } else {
            None
        };
        let mut layers = Vec::with_capacity(n_layers);
        for &(kind, activation, in_ch, out_ch, kernel, stride, pad, out_pad) in &shapes {
            let ws = ConvLayer::weight_shape(kind, in_ch, out_ch, kernel);
            let weight = Tensor::new(ws.to_vec(), r.f64_vec(ws.iter().product())?)?;
            let bias = Tensor::new(vec![out_ch], r.f64_vec(out_ch)?)?;
            layers.push(ConvLayer {
                kind,
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                out_pad,
                activation,
                weight: Parameter::new(weight),
                bias: Parameter::new(bias),
            });
        }
        let latent = layers[encoder_len - 1].out_ch;
        let mu = r.f64_vec(latent)?;
        let log_b = r.f64_vec(latent)?;
        r.finish()?;
        let model = LicModel {
            config,
            layers,
            encoder_len,
            prior: FactorizedPrior::from_values(mu, log_b)?,
            mask,
            pruned: flags & 1 != 0,
        };
        if let Some(m) = &model.mask {
            m.validate(&model).map_err(|e| format_err(WHAT, e.to_string()))?;
        }
        Ok(model)
    }
}
