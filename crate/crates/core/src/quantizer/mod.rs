//! Symmetric per-layer INT8 quantization: calibration, straight-through fake
//! quantization for fine-tuning, and integer export.
//!
//! Weights use `[-127, 127]` with a learnable scale `s = s0·exp(ρ)`. Activations
//! use fixed calibrated scales: ReLU outputs are unsigned `[0, 255]`, the latent
//! is integer (scale 1, `[-127, 127]`) and the reconstruction is 8-bit pixels.

mod model;
mod qat;

pub use model::{QLayer, QuantizedModel, SizeReport, QUANT_MAGIC, QUANT_VERSION};
pub use qat::{qat_finetune, QatControl, QatObserver, NoObserver};

use std::cell::RefCell;

use crate::codec::{Activation, LayerHooks, LicModel};
use crate::error::{invalid, Error, Result};
use crate::nn::{quantize_value, Graph, Parameter, Var};
use crate::tensor::Tensor;

pub const WEIGHT_QMAX: i32 = 127;
pub const ACT_QMAX: i32 = 255;
pub const LATENT_QMAX: i32 = 127;
/// Scale used when a calibrated range is all zeros.
pub const SCALE_FLOOR: f64 = 1.0 / 1_048_576.0;
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;

/// `clip(round(θ/s), -127, 127) · s`.
pub fn fake_quant(theta: f64, s: f64) -> f64 {
    fake_quant_range(theta, s, -(WEIGHT_QMAX as f64), WEIGHT_QMAX as f64)
}

pub fn fake_quant_range(theta: f64, s: f64, qmin: f64, qmax: f64) -> f64 {
    quantize_value(theta, s, qmin, qmax) * s
}

/// Symmetric scale for a `bits`-wide signed grid covering `max_abs`.
pub fn symmetric_scale(max_abs: f64, qmax: i32) -> f64 {
    (max_abs / qmax as f64).max(SCALE_FLOOR)
}

/// Snaps an image in `[0, 1]` onto the 8-bit grid.
pub fn quantize_input(x: &Tensor) -> Tensor {
    x.map(|v| fake_quant_range(v, PIXEL_SCALE, 0.0, ACT_QMAX as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn empty() -> Self {
        Range {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn extend(&mut self, data: &[f64]) {
        for &v in data {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Observed weight and output-activation ranges per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    pub weights: Vec<Range>,
    pub activations: Vec<Range>,
}

/// Forward-only pass of the float model over `images` recording ranges.
pub fn calibrate(model: &LicModel, images: &[Tensor]) -> Result<CalibrationStats> {
    if images.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let weights = model
        .layers
        .iter()
        .map(|l| {
            let mut r = Range::empty();
            r.extend(l.weight.value.data());
            r
        })
        .collect();
    let mut activations = vec![Range::empty(); model.layers.len()];
    for x in images {
        let mut h = quantize_input(x);
        model.check_input(h.shape())?;
        for (i, l) in model.layers.iter().enumerate() {
            h = l.activate(l.forward(&h)?);
            if i + 1 == model.encoder_len {
                h = h.map(f64::round);
            }
            activations[i].extend(h.data());
        }
    }
    Ok(CalibrationStats { weights, activations })
}

/// `max(|min|, |max|) / 127`, floored for all-zero layers.
pub fn scale_from_stats(stats: &CalibrationStats, layer: usize) -> Result<f64> {
    let r = stats
        .weights
        .get(layer)
        .ok_or_else(|| invalid(format!("no calibration stats for layer {layer}")))?;
    Ok(symmetric_scale(r.max_abs(), WEIGHT_QMAX))
}

/// Fixed activation grid of one layer output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActQuant {
    pub scale: f64,
    pub qmin: i32,
    pub qmax: i32,
}

/// Quantization state of one layer during fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant {
    /// Calibrated initial weight scale.
    pub s0: f64,
    /// Learned log-multiplier of the weight scale.
    pub rho: Parameter,
    pub s_in: f64,
    pub out: ActQuant,
}

impl LayerQuant {
    pub fn weight_scale(&self) -> f64 {
        self.rho.value.item().exp() * self.s0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantContext {
    pub layers: Vec<LayerQuant>,
}

impl QuantContext {
    pub fn new(model: &LicModel, stats: &CalibrationStats) -> Result<Self> {
        if stats.weights.len() != model.layers.len() || stats.activations.len() != model.layers.len() {
            return Err(invalid("calibration stats do not match the model"));
        }
        let mut layers = Vec::with_capacity(model.layers.len());
        let mut s_in = PIXEL_SCALE;
        for (i, l) in model.layers.iter().enumerate() {
            let out = match l.activation {
                Activation::Relu => ActQuant {
                    scale: symmetric_scale(stats.activations[i].max.max(0.0), ACT_QMAX),
                    qmin: 0,
                    qmax: ACT_QMAX,
                },
                Activation::Identity => ActQuant {
                    scale: 1.0,
                    qmin: -LATENT_QMAX,
                    qmax: LATENT_QMAX,
                },
                Activation::Clamp01 => ActQuant {
                    scale: PIXEL_SCALE,
                    qmin: 0,
                    qmax: ACT_QMAX,
                },
            };
            layers.push(LayerQuant {
                s0: scale_from_stats(stats, i)?,
                rho: Parameter::new(Tensor::scalar(0.0)),
                s_in,
                out,
            });
            s_in = out.scale;
        }
        Ok(QuantContext { layers })
    }

    pub fn rho_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().map(|l| &mut l.rho).collect()
    }

    /// Graph hooks applying the fake quantizers. `training` leaves the latent
    /// unquantized so the caller can add relaxation noise.
    pub fn hooks(&self, g: &mut Graph, training: bool) -> QuantHooks<'_> {
        let rho = self.layers.iter().map(|l| g.param(l.rho.value.clone())).collect();
        QuantHooks {
            ctx: self,
            rho,
            training,
            weights: RefCell::new(vec![None; self.layers.len()]),
        }
    }
}

pub struct QuantHooks<'a> {
    ctx: &'a QuantContext,
    pub rho: Vec<Var>,
    training: bool,
    weights: RefCell<Vec<Option<(Var, f64)>>>,
}

impl QuantHooks<'_> {
    /// Fake-quantized weight of `layer` and its scale, once the forward pass has run.
    pub fn quantized_weight(&self, layer: usize) -> Option<(Var, f64)> {
        self.weights.borrow()[layer]
    }
}

impl LayerHooks for QuantHooks<'_> {
    fn weight(&self, g: &mut Graph, layer: usize, w: Var) -> Result<Var> {
        let e = g.exp(self.rho[layer])?;
        let s = g.scale(e, self.ctx.layers[layer].s0)?;
        let sv = g.value(s).item();
        let q = g.fake_quant(w, s, -(WEIGHT_QMAX as f64), WEIGHT_QMAX as f64)?;
        self.weights.borrow_mut()[layer] = Some((q, sv));
        Ok(q)
    }

    fn bias(&self, g: &mut Graph, layer: usize, b: Var) -> Result<Var> {
        let sw = self.weights.borrow()[layer]
            .map(|(_, s)| s)
            .expect("weight hook runs before bias hook");
        g.round_to_step(b, sw * self.ctx.layers[layer].s_in)
    }

    fn activate(&self, g: &mut Graph, layer: usize, activation: Activation, pre: Var) -> Result<Var> {
        let q = self.ctx.layers[layer].out;
        if activation == Activation::Identity && self.training {
            return Ok(pre);
        }
        g.fake_quant_fixed(pre, q.scale, q.qmin as f64, q.qmax as f64)
    }
}
