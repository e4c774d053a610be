//! Float-domain embedding followed by post-training quantization: the
//! baseline that shows quantization alone erasing a weight watermark.

use serde::{Deserialize, Serialize};

use super::qaw::{BetaRecord, BetaSchedule, QawConfig};
use super::{extract, extract_quantized, wm_loss, ExtractionReport, KeyMatrix, WatermarkBits};
use crate::codec::{batch_rd, diverged, FloatHooks, LicModel, Sampler, TrainConfig};
use crate::error::{invalid, Result};
use crate::nn::{quantize_value, AdamState, Graph};
use crate::quantizer::{calibrate, symmetric_scale, QatControl, QuantContext, QuantizedModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveReport {
    pub steps: usize,
    pub beta_trace: Vec<BetaRecord>,
    pub float: ExtractionReport,
    /// After INT8 export.
    pub int8: ExtractionReport,
    /// After 4-bit symmetric weight quantization of the target layer.
    pub int4: ExtractionReport,
}

/// Symmetric per-layer post-training quantization of `w` to `[-qmax, qmax]`.
pub fn ptq_weights(w: &[f64], qmax: i32) -> Vec<f64> {
    let s = symmetric_scale(w.iter().fold(0.0f64, |m, v| m.max(v.abs())), qmax);
    let q = qmax as f64;
    w.iter().map(|&t| quantize_value(t, s, -q, q) * s).collect()
}

/// Trains the float model on `R + λD + βE` with the same step budget and
/// `β` schedule as QAW, but checking extraction on the float weights, then
/// quantizes without further training.
pub fn naive_postfloat_watermark_then_quantize(
    model: &LicModel,
    key: &KeyMatrix,
    bits: &WatermarkBits,
    data: &[Tensor],
    tc: &TrainConfig,
    cfg: &QawConfig,
) -> Result<(LicModel, NaiveReport)> {
    cfg.validate()?;
    if cfg.beta == 0.0 {
        return Err(invalid("float embedding needs a positive beta"));
    }
    let t = key.target_layer;
    if t >= model.layers.len() || model.layers[t].weight.value.numel() != key.rows() {
        return Err(invalid(format!("key does not match layer {t}")));
    }
    let mut m = model.clone();
    let mut sampler = Sampler::new(tc);
    let mut adam = AdamState::new(tc.adam);
    let mut schedule = BetaSchedule::new(cfg);
    let mut done = 0;
    m.enforce_mask();
    let float = loop {
        if schedule.wants_check(done, tc.steps) {
            let r = extract(m.layers[t].weight.value.data(), key, bits)?;
            if schedule.update(done, tc.steps, &r)? == QatControl::Stop {
                break r;
            }
        }
        let x = sampler.batch(data)?;
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let vars = batch_rd(&m, &mut g, &bound, &x, &mut sampler, &FloatHooks).map_err(diverged(done))?;
        let e = wm_loss(&mut g, bound.weights[t], key, bits)?;
        let e = g.scale(e, schedule.beta)?;
        let loss = g.add(vars.loss, e)?;
        let grads = g.backward(loss).map_err(diverged(done))?;
        m.load_grads(&bound, &grads);
        m.enforce_mask();
        adam.step(&mut m.params_mut(), tc.adam.lr);
        m.enforce_mask();
        done += 1;
    };
    let ctx = QuantContext::new(&m, &calibrate(&m, data)?)?;
    let qm = QuantizedModel::export(&m, &ctx, data)?;
    let int8 = extract_quantized(&qm, key, bits)?;
    let int4 = extract(&ptq_weights(m.layers[t].weight.value.data(), 7), key, bits)?;
    Ok((
        m,
        NaiveReport {
            steps: done,
            beta_trace: schedule.trace,
            float,
            int8,
            int4,
        },
    ))
}
