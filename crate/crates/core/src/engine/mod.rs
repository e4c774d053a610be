//! Pure-integer execution of a [`QuantizedModel`].
//!
//! Convolutions accumulate INT8 weights against integer activations in 64-bit
//! registers whose range is proven to fit INT32 at load time. Each output is
//! requantized with a 32-bit fixed-point multiplier and a rounding right shift.

mod codec;

pub use codec::{blend_patches, decode_image, encode_image, plan_grid, split_patches, PatchConfig};

use sha2::{Digest, Sha256};

use crate::codec::LayerKind;
use crate::error::{shape_err, Error, Result};
use crate::quantizer::{QLayer, QuantizedModel, ACT_QMAX};
use crate::tensor::Tensor;

/// `acc · M` realised as `acc · m0 · 2^-shift` with `m0` in `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Requant {
    pub m0: i64,
    pub shift: i32,
}

impl Requant {
    pub fn new(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::InvalidArgument(format!("requantization multiplier {m} must be positive")));
        }
        // m = f · 2^e with f in [0.5, 1).
        let mut e = m.log2().floor() as i32 + 1;
        let mut f = m / 2f64.powi(e);
        while f >= 1.0 {
            f /= 2.0;
            e += 1;
        }
        while f < 0.5 {
            f *= 2.0;
            e -= 1;
        }
        let mut m0 = (f * 2_147_483_648.0).round() as i64;
        if m0 == 1 << 31 {
            m0 >>= 1;
            e += 1;
        }
        Ok(Requant { m0, shift: 31 - e })
    }

    /// `round_half_away(acc · M)`.
    pub fn apply(&self, acc: i64) -> i64 {
        let p = acc as i128 * self.m0 as i128;
        if self.shift <= 0 {
            return (p << (-self.shift).min(64)) as i64;
        }
        if self.shift > 126 {
            return 0;
        }
        let half = 1i128 << (self.shift - 1);
        let mag = (p.abs() + half) >> self.shift;
        (if p < 0 { -mag } else { mag }) as i64
    }

    pub fn value(&self) -> f64 {
        self.m0 as f64 * 2f64.powi(-self.shift)
    }
}

/// One executable layer; transposed convolutions are stored as the
/// equivalent stride-1 convolution over a zero-inserted input.
#[derive(Clone, Debug)]
pub struct IntLayer {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    /// `[O, C, k, k]`, already flipped for transposed layers.
    weight: Vec<i8>,
    bias: Vec<i64>,
    pub requant: Requant,
    pub qmin: i64,
    pub qmax: i64,
    /// Largest possible `|acc|` given the input range.
    pub acc_bound: i64,
}

impl IntLayer {
    fn from_q(index: usize, q: &QLayer, in_abs_max: i64) -> Result<Self> {
        let (c, o, k) = (q.in_ch, q.out_ch, q.kernel);
        let k2 = k * k;
        let weight = match q.kind {
            LayerKind::Conv => q.weight.clone(),
            LayerKind::ConvTranspose => {
                let mut w = vec![0i8; o * c * k2];
                for ci in 0..c {
                    for oi in 0..o {
                        for t in 0..k2 {
                            w[(oi * c + ci) * k2 + (k2 - 1 - t)] = q.weight[(ci * o + oi) * k2 + t];
                        }
                    }
                }
                w
            }
        };
        let mut acc_bound = 0i64;
        for oi in 0..o {
            let s: i64 = weight[oi * c * k2..(oi + 1) * c * k2].iter().map(|&v| (v as i64).abs()).sum();
            acc_bound = acc_bound.max(s * in_abs_max + (q.bias[oi] as i64).abs());
        }
        if acc_bound > i32::MAX as i64 {
            return Err(Error::Overflow {
                layer: index,
                detail: format!("accumulator may reach {acc_bound}, beyond int32"),
            });
        }
        Ok(IntLayer {
            kind: q.kind,
            in_ch: c,
            out_ch: o,
            kernel: k,
            stride: q.stride,
            pad: q.pad,
            out_pad: q.out_pad,
            weight,
            bias: q.bias.iter().map(|&b| b as i64).collect(),
            requant: Requant::new(q.s_w * q.s_in / q.s_out)?,
            qmin: q.qmin as i64,
            qmax: q.qmax as i64,
            acc_bound,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv => (
                (h + 2 * self.pad - self.kernel) / self.stride + 1,
                (w + 2 * self.pad - self.kernel) / self.stride + 1,
            ),
            LayerKind::ConvTranspose => (
                (h - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
                (w - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
            ),
        }
    }

    /// INT32 accumulators for one `[C, H, W]` input.
    pub fn accumulate(&self, x: &[i32], h: usize, w: usize) -> Result<(Vec<i64>, usize, usize)> {
        if x.len() != self.in_ch * h * w {
            return Err(shape_err("int_forward", format!("{} values for {}x{h}x{w}", x.len(), self.in_ch)));
        }
        let k = self.kernel;
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(shape_err("int_forward", format!("{h}x{w} input is smaller than the kernel")));
        }
        let (ho, wo) = self.output_size(h, w);
        let acc = match self.kind {
            LayerKind::Conv => conv_acc(self, x, h, w, self.stride, self.pad as isize, self.pad as isize, ho, wo),
            LayerKind::ConvTranspose => {
                let s = self.stride;
                let (hd, wd) = ((h - 1) * s + 1, (w - 1) * s + 1);
                let mut dil = vec![0i32; self.in_ch * hd * wd];
                for c in 0..self.in_ch {
                    for y in 0..h {
                        for xx in 0..w {
                            dil[(c * hd + y * s) * wd + xx * s] = x[(c * h + y) * w + xx];
                        }
                    }
                }
                let lead = (k - 1 - self.pad) as isize;
                conv_acc(self, &dil, hd, wd, 1, lead, lead, ho, wo)
            }
        };
        Ok((acc, ho, wo))
    }

    pub fn forward(&self, x: &[i32], h: usize, w: usize) -> Result<(Vec<i32>, usize, usize)> {
        let (acc, ho, wo) = self.accumulate(x, h, w)?;
        let out = acc
            .iter()
            .map(|&a| self.requant.apply(a).clamp(self.qmin, self.qmax) as i32)
            .collect();
        Ok((out, ho, wo))
    }
}

/// Cross-correlation with top/left padding `pt`/`pl`; positions outside the input read zero.
#[allow(clippy::too_many_arguments)]
fn conv_acc(l: &IntLayer, x: &[i32], h: usize, w: usize, stride: usize, pt: isize, pl: isize, ho: usize, wo: usize) -> Vec<i64> {
    let (c_in, k) = (l.in_ch, l.kernel);
    let k2 = k * k;
    let mut out = vec![0i64; l.out_ch * ho * wo];
    for o in 0..l.out_ch {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = l.bias[o]);
        for c in 0..c_in {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = l.weight[(o * c_in + c) * k2 + ky * k + kx] as i64;
                    if wv == 0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pt;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o_v) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pl;
                            if ix >= 0 && (ix as usize) < w {
                                *o_v += wv * row[ix as usize] as i64;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// A loaded integer model.
#[derive(Clone, Debug)]
pub struct IntModel {
    pub layers: Vec<IntLayer>,
    pub encoder_len: usize,
    pub total_stride: usize,
    pub quantized: QuantizedModel,
    pub hash: [u8; 32],
}

impl IntModel {
    /// Loads and proves accumulator headroom for every layer.
    pub fn load(qm: QuantizedModel) -> Result<Self> {
        let mut layers = Vec::with_capacity(qm.layers.len());
        let mut in_abs = ACT_QMAX as i64;
        for (i, q) in qm.layers.iter().enumerate() {
            layers.push(IntLayer::from_q(i, q, in_abs)?);
            in_abs = (q.qmin as i64).abs().max((q.qmax as i64).abs());
        }
        let bytes = qm.to_bytes();
        Ok(IntModel {
            layers,
            encoder_len: qm.encoder_len,
            total_stride: qm.config.total_stride(),
            hash: Sha256::digest(&bytes).into(),
            quantized: qm,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::load(QuantizedModel::from_bytes(bytes)?)
    }

    pub fn latent_channels(&self) -> usize {
        self.layers[self.encoder_len - 1].out_ch
    }

    /// Runs `layers[range]` on one `[C, H, W]` integer input, returning every output.
    pub fn forward_layers(
        &self,
        range: std::ops::Range<usize>,
        x: Vec<i32>,
        h: usize,
        w: usize,
    ) -> Result<Vec<(Vec<i32>, usize, usize)>> {
        let mut outs = Vec::with_capacity(range.len());
        let (mut cur, mut ch, mut cw) = (x, h, w);
        for l in &self.layers[range] {
            let (o, ho, wo) = l.forward(&cur, ch, cw)?;
            outs.push((o.clone(), ho, wo));
            cur = o;
            ch = ho;
            cw = wo;
        }
        Ok(outs)
    }

    /// Three-channel `[1, 3, H, W]` image in `[0, 1]` to 8-bit integers.
    pub fn pixels(x: &Tensor) -> Result<(Vec<i32>, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if b != 1 || c != 3 {
            return Err(shape_err("int_forward", format!("expected one RGB image, got {:?}", x.shape())));
        }
        let q = x
            .data()
            .iter()
            .map(|&v| crate::nn::round_half_away(v * ACT_QMAX as f64).clamp(0.0, ACT_QMAX as f64) as i32)
            .collect();
        Ok((q, h, w))
    }

    /// Integer latent of one image.
    pub fn encode(&self, x: &Tensor) -> Result<(Vec<i32>, usize, usize)> {
        let (q, h, w) = Self::pixels(x)?;
        if h % self.total_stride != 0 || w % self.total_stride != 0 {
            return Err(shape_err(
                "encode",
                format!("{h}x{w} is not divisible by the total stride {}; pad the image", self.total_stride),
            ));
        }
        let mut outs = self.forward_layers(0..self.encoder_len, q, h, w)?;
        Ok(outs.pop().expect("encoder has layers"))
    }

    /// Reconstruction in `[0, 1]` from an integer latent.
    pub fn decode(&self, latent: Vec<i32>, lh: usize, lw: usize) -> Result<Tensor> {
        let mut outs = self.forward_layers(self.encoder_len..self.layers.len(), latent, lh, lw)?;
        let (px, h, w) = outs.pop().expect("decoder has layers");
        let data = px.iter().map(|&v| v as f64 / ACT_QMAX as f64).collect();
        Tensor::new(vec![1, 3, h, w], data)
    }
}
