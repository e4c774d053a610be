//! Convolutional autoencoder with a factorized logistic prior, trained on the
//! rate-distortion objective `L = R + λ·D`.

mod checkpoint;
mod prior;
mod train;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use prior::FactorizedPrior;
pub use train::{batch_rd, evaluate, evaluate_with, train, train_steps, RdEval, RdVars, Sampler, TrainConfig};
pub(crate) use train::{diverged, report};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{conv2d, conv_transpose2d, Graph, Parameter, Var};
use crate::pruner::ChannelMask;
use crate::tensor::Tensor;

/// Distortion is measured on the 8-bit pixel scale: `D = 255² · MSE(x, x̂)`.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LicConfig {
    pub stages: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub lambda: f64,
}

impl Default for LicConfig {
    fn default() -> Self {
        LicConfig {
            stages: 4,
            channels: 32,
            kernel: 5,
            stride: 2,
            lambda: 0.01,
        }
    }
}

impl LicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(invalid("stages must be >= 1"));
        }
        if self.channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(invalid("channels, kernel and stride must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.kernel < self.stride {
            return Err(invalid("kernel must be at least the stride"));
        }
        if self.out_pad() >= self.stride {
            return Err(invalid(format!(
                "kernel {} with stride {} cannot resample exactly",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stride.pow(self.stages as u32)
    }

    /// Padding that makes each stage an exact `stride`× resampling.
    pub fn pad(&self) -> usize {
        (self.kernel - self.stride).div_ceil(2)
    }

    pub fn out_pad(&self) -> usize {
        self.stride + 2 * self.pad() - self.kernel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Latent output, left linear.
    Identity,
    /// Reconstruction output, clamped to `[0, 1]`.
    Clamp01,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub activation: Activation,
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ConvLayer {
    pub fn weight_shape(kind: LayerKind, in_ch: usize, out_ch: usize, k: usize) -> [usize; 4] {
        match kind {
            LayerKind::Conv => [out_ch, in_ch, k, k],
            LayerKind::ConvTranspose => [in_ch, out_ch, k, k],
        }
    }

    /// Pre-activation response.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward_with(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        match self.kind {
            LayerKind::Conv => conv2d(x, w, b, self.stride, self.pad),
            LayerKind::ConvTranspose => conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        match self.kind {
            LayerKind::Conv => g.conv2d(x, w, b, self.stride, self.pad),
            LayerKind::ConvTranspose => g.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad),
        }
    }

    pub fn activate(&self, x: Tensor) -> Tensor {
        match self.activation {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Identity => x,
            Activation::Clamp01 => x.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Flat indices of the weights feeding output channel `o`.
    pub fn output_filter_indices(&self, o: usize) -> Vec<usize> {
        let kk = self.kernel * self.kernel;
        match self.kind {
            LayerKind::Conv => {
                let n = self.in_ch * kk;
                (o * n..(o + 1) * n).collect()
            }
            LayerKind::ConvTranspose => (0..self.in_ch)
                .flat_map(|i| {
                    let base = (i * self.out_ch + o) * kk;
                    base..base + kk
                })
                .collect(),
        }
    }

    /// Multiply-accumulates for one image whose *input* to this layer is `h × w`.
    pub fn macs(&self, h: usize, w: usize, active_out: usize) -> (u64, usize, usize) {
        let kk = (self.kernel * self.kernel) as u64;
        match self.kind {
            LayerKind::Conv => {
                let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
                let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
                ((ho * wo) as u64 * self.in_ch as u64 * active_out as u64 * kk, ho, wo)
            }
            LayerKind::ConvTranspose => {
                let ho = (h - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad;
                let wo = (w - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad;
                ((h * w) as u64 * self.in_ch as u64 * active_out as u64 * kk, ho, wo)
            }
        }
    }
}

/// How the latent is discretized between encoder and decoder.
pub enum LatentMode {
    /// Training relaxation: add the given `U(-1/2, 1/2)` sample.
    Noise(Tensor),
    /// Inference: round to the nearest integer.
    Round,
}

/// Per-layer hooks used to swap in fake quantization around the float path.
pub trait LayerHooks {
    fn weight(&self, _g: &mut Graph, _layer: usize, w: Var) -> Result<Var> {
        Ok(w)
    }
    fn bias(&self, _g: &mut Graph, _layer: usize, b: Var) -> Result<Var> {
        Ok(b)
    }
    fn activate(&self, g: &mut Graph, _layer: usize, activation: Activation, pre: Var) -> Result<Var> {
        match activation {
            Activation::Relu => g.relu(pre),
            Activation::Identity => Ok(pre),
            Activation::Clamp01 => g.clamp(pre, 0.0, 1.0),
        }
    }
}

/// Plain float execution.
pub struct FloatHooks;
impl LayerHooks for FloatHooks {}

/// Graph handles for every model parameter, in declaration order.
pub struct Bound {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub mu: Var,
    pub log_b: Var,
}

pub struct ForwardVars {
    pub latent: Var,
    pub latent_hat: Var,
    pub recon: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LicModel {
    pub config: LicConfig,
    pub layers: Vec<ConvLayer>,
    pub encoder_len: usize,
    pub prior: FactorizedPrior,
    pub mask: Option<ChannelMask>,
    pub pruned: bool,
}

impl LicModel {
    /// Kaiming-uniform weights (fan-in), zero biases, unit-scale prior.
    pub fn new(config: LicConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, s) = (config.channels, config.kernel, config.stride);
        let (pad, out_pad) = (config.pad(), config.out_pad());
        let mut layers = Vec::new();
        let make = |kind, in_ch, out_ch, activation, rng: &mut ChaCha8Rng| {
            let shape = ConvLayer::weight_shape(kind, in_ch, out_ch, k);
            let fan_in = match kind {
                LayerKind::Conv => in_ch * k * k,
                LayerKind::ConvTranspose => (in_ch * k * k / (s * s)).max(1),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
            ConvLayer {
                kind,
                in_ch,
                out_ch,
                kernel: k,
                stride: s,
                pad,
                out_pad,
                activation,
                weight: Parameter::new(w),
                bias: Parameter::new(Tensor::zeros(&[out_ch])),
            }
        };
        for i in 0..config.stages {
            let in_ch = if i == 0 { IMAGE_CHANNELS } else { n };
            let act = if i + 1 == config.stages { Activation::Identity } else { Activation::Relu };
            layers.push(make(LayerKind::Conv, in_ch, n, act, &mut rng));
        }
        for i in 0..config.stages {
            let last = i + 1 == config.stages;
            let out_ch = if last { IMAGE_CHANNELS } else { n };
            let act = if last { Activation::Clamp01 } else { Activation::Relu };
            layers.push(make(LayerKind::ConvTranspose, n, out_ch, act, &mut rng));
        }
        Ok(LicModel {
            encoder_len: config.stages,
            prior: FactorizedPrior::new(n),
            config,
            layers,
            mask: None,
            pruned: false,
        })
    }

    pub fn encoder_layers(&self) -> &[ConvLayer] {
        &self.layers[..self.encoder_len]
    }

    pub fn decoder_layers(&self) -> &[ConvLayer] {
        &self.layers[self.encoder_len..]
    }

    /// Global index of the `i`-th (0-based) decoder layer.
    pub fn decoder_layer_index(&self, i: usize) -> Result<usize> {
        if i >= self.layers.len() - self.encoder_len {
            return Err(invalid(format!("decoder has no layer {i}")));
        }
        Ok(self.encoder_len + i)
    }

    pub fn latent_channels(&self) -> usize {
        self.layers[self.encoder_len - 1].out_ch
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [_, c, h, w] => (*c, *h, *w),
            _ => return Err(shape_err("encode", format!("expected [B,C,H,W], got {shape:?}"))),
        };
        if c != IMAGE_CHANNELS {
            return Err(shape_err("encode", format!("expected {IMAGE_CHANNELS} channels, got {c}")));
        }
        let ts = self.config.total_stride();
        if h % ts != 0 || w % ts != 0 {
            return Err(shape_err(
                "encode",
                format!("{h}x{w} is not divisible by the total stride {ts}; pad the image to a multiple of {ts}"),
            ));
        }
        Ok(())
    }

    /// Float latent `z` (not yet discretized).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for layer in self.encoder_layers() {
            h = layer.activate(layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut h = latent.clone();
        for layer in self.decoder_layers() {
            h = layer.activate(layer.forward(&h)?);
        }
        Ok(h)
    }

    /// Rounded latent and reconstruction.
    pub fn reconstruct(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.encode(x)?.map(f64::round);
        let xh = self.decode(&z)?;
        Ok((z, xh))
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        let weights = self.layers.iter().map(|l| g.param(l.weight.value.clone())).collect();
        let biases = self.layers.iter().map(|l| g.param(l.bias.value.clone())).collect();
        Bound {
            weights,
            biases,
            mu: g.param(self.prior.mu.value.clone()),
            log_b: g.param(self.prior.log_b.value.clone()),
        }
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        latent: LatentMode,
        hooks: &dyn LayerHooks,
    ) -> Result<ForwardVars> {
        self.check_input(g.value(x).shape())?;
        let mut h = x;
        let mut z = x;
        let mut zhat = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = hooks.weight(g, i, bound.weights[i])?;
            let b = hooks.bias(g, i, bound.biases[i])?;
            let pre = layer.forward_graph(g, h, w, b)?;
            h = hooks.activate(g, i, layer.activation, pre)?;
            if i + 1 == self.encoder_len {
                z = h;
                zhat = match &latent {
                    LatentMode::Noise(u) => {
                        if u.shape() != g.value(z).shape() {
                            return Err(shape_err("relax_quantize", "noise shape differs from latent"));
                        }
                        let c = g.constant(u.clone());
                        g.add(z, c)?
                    }
                    LatentMode::Round => {
                        let r = g.value(z).map(f64::round);
                        g.constant(r)
                    }
                };
                h = zhat;
            }
        }
        Ok(ForwardVars {
            latent: z,
            latent_hat: zhat,
            recon: h,
        })
    }

    /// Every parameter in declaration order: (weight, bias) per layer, then prior location and log-scale.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.prior.mu);
        out.push(&mut self.prior.log_b);
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.prior.mu);
        out.push(&self.prior.log_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn nonzero_param_count(&self) -> usize {
        self.params()
            .iter()
            .map(|p| p.value.data().iter().filter(|v| **v != 0.0).count())
            .sum()
    }

    /// Copies gradients out of a finished backward pass.
    pub fn load_grads(&mut self, bound: &Bound, grads: &crate::nn::Gradients) {
        let pick = |v: Var, p: &mut Parameter| match grads.get(v) {
            Some(g) => p.grad = g.clone(),
            None => p.zero_grad(),
        };
        for (i, l) in self.layers.iter_mut().enumerate() {
            pick(bound.weights[i], &mut l.weight);
            pick(bound.biases[i], &mut l.bias);
        }
        pick(bound.mu, &mut self.prior.mu);
        pick(bound.log_b, &mut self.prior.log_b);
    }

    /// Zeroes gradients and values of masked channels.
    pub fn enforce_mask(&mut self) {
        let Some(mask) = self.mask.clone() else { return };
        mask.apply(self);
    }
}

/// Rate, distortion and combined loss of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdReport {
    /// Bits per pixel.
    pub rate: f64,
    /// `255² · MSE`.
    pub distortion: f64,
    pub loss: f64,
}

impl RdReport {
    pub fn new(rate: f64, distortion: f64, lambda: f64) -> Self {
        RdReport {
            rate,
            distortion,
            loss: rate + lambda * distortion,
        }
    }

    /// Report for a reconstruction `x_hat` of `x` coded at `bits` total.
    pub fn from_images(x: &Tensor, x_hat: &Tensor, bits: f64, lambda: f64) -> Result<Self> {
        if x.shape() != x_hat.shape() {
            return Err(shape_err("rd_report", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
        }
        let (b, _, h, w) = x.dims4()?;
        let mse = x
            .data()
            .iter()
            .zip(x_hat.data())
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / x.numel() as f64;
        Ok(Self::new(bits / (b * h * w) as f64, DISTORTION_SCALE * mse, lambda))
    }

    pub fn mse(&self) -> f64 {
        self.distortion / DISTORTION_SCALE
    }
}
