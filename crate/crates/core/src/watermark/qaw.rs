//! Quantization-aware watermarking: `R + λD + βE` under fake quantization
//! with an adaptive `β`.

use serde::{Deserialize, Serialize};

use super::{extract, extract_quantized, wm_loss, ExtractionReport, KeyMatrix, WatermarkBits};
use crate::codec::{LicModel, RdReport, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::nn::{quantize_value, Graph, Var};
use crate::quantizer::{qat_finetune, QatControl, QatObserver, QuantContext, QuantHooks, QuantizedModel, WEIGHT_QMAX};
use crate::tensor::Tensor;

/// Reference `(λ, β)` pairs; `β` here is the initial value.
const BETA_TABLE: [(f64, f64); 5] = [(0.001, 0.01), (0.005, 0.02), (0.01, 0.05), (0.05, 0.1), (0.1, 0.1)];

/// Initial `β` of the reference pair whose `λ` is nearest on a log scale.
pub fn default_beta(lambda: f64) -> f64 {
    BETA_TABLE
        .iter()
        .min_by(|a, b| {
            let da = (a.0.ln() - lambda.ln()).abs();
            let db = (b.0.ln() - lambda.ln()).abs();
            da.total_cmp(&db)
        })
        .map(|p| p.1)
        .expect("table is not empty")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QawConfig {
    /// Initial `β`; 0 disables the watermark term and its adaptation.
    pub beta: f64,
    pub check_interval: usize,
    pub raise: f64,
    pub lower: f64,
    pub beta_floor: f64,
    /// Hard cap on steps when embedding is still incomplete after the nominal count.
    pub max_steps: usize,
    /// Defaults to the second decoder layer.
    pub target_layer: Option<usize>,
    pub bits: usize,
}

impl Default for QawConfig {
    fn default() -> Self {
        QawConfig {
            beta: 0.05,
            check_interval: 50,
            raise: 1.5,
            lower: 1.0 / 1.2,
            beta_floor: 1e-4,
            max_steps: 4000,
            target_layer: None,
            bits: 64,
        }
    }
}

impl QawConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(invalid(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if self.check_interval == 0 {
            return Err(invalid("check interval must be positive"));
        }
        if !(self.raise > 1.0 && self.lower > 0.0 && self.lower < 1.0) {
            return Err(invalid("beta must rise on failure (raise > 1) and fall on success (0 < lower < 1)"));
        }
        if !(self.beta_floor > 0.0) {
            return Err(invalid("beta floor must be positive"));
        }
        Ok(())
    }

    pub fn target(&self, model: &LicModel) -> Result<usize> {
        match self.target_layer {
            Some(t) if t < model.layers.len() => Ok(t),
            Some(t) => Err(invalid(format!("target layer {t} does not exist"))),
            None => model.decoder_layer_index(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRecord {
    pub step: usize,
    pub beta: f64,
    pub c_ber: f64,
}

pub fn beta_trace_csv(trace: &[BetaRecord]) -> String {
    let mut s = String::from("step,beta,c_ber\n");
    for r in trace {
        s.push_str(&format!("{},{:.6e},{:.4}\n", r.step, r.beta, r.c_ber));
    }
    s
}

#[derive(Clone, Debug)]
pub struct QawResult {
    pub quantized: QuantizedModel,
    pub trace: Vec<RdReport>,
    pub beta_trace: Vec<BetaRecord>,
    pub steps: usize,
    /// Extraction from the exported integer model.
    pub report: ExtractionReport,
}

/// Weights exactly as the integer export will hold them.
fn simulated_weights(model: &LicModel, ctx: &QuantContext, layer: usize) -> Vec<f64> {
    let s = ctx.layers[layer].weight_scale();
    let q = WEIGHT_QMAX as f64;
    model.layers[layer]
        .weight
        .value
        .data()
        .iter()
        .map(|&t| quantize_value(t, s, -q, q) * s)
        .collect()
}

/// Adaptive `β`: raised after a failed check, lowered after two consecutive
/// successes. Past the nominal step count every step is checked and the run
/// ends on the first exact read-back.
pub(crate) struct BetaSchedule<'a> {
    cfg: &'a QawConfig,
    pub beta: f64,
    streak: usize,
    pub trace: Vec<BetaRecord>,
}

impl<'a> BetaSchedule<'a> {
    pub fn new(cfg: &'a QawConfig) -> Self {
        BetaSchedule {
            cfg,
            beta: cfg.beta,
            streak: 0,
            trace: Vec::new(),
        }
    }

    fn on_interval(&self, done: usize) -> bool {
        done > 0 && done.is_multiple_of(self.cfg.check_interval)
    }

    pub fn wants_check(&self, done: usize, nominal: usize) -> bool {
        self.on_interval(done) || done >= nominal
    }

    pub fn update(&mut self, done: usize, nominal: usize, r: &ExtractionReport) -> Result<QatControl> {
        let ok = r.is_exact();
        if self.on_interval(done) {
            if ok {
                self.streak += 1;
                if self.streak >= 2 {
                    self.beta = (self.beta * self.cfg.lower).max(self.cfg.beta_floor);
                    self.streak = 0;
                }
            } else {
                self.beta *= self.cfg.raise;
                self.streak = 0;
            }
            self.trace.push(BetaRecord {
                step: done,
                beta: self.beta,
                c_ber: r.c_ber,
            });
        }
        if done < nominal {
            return Ok(QatControl::Continue);
        }
        if ok {
            return Ok(QatControl::Stop);
        }
        if done >= self.cfg.max_steps {
            return Err(Error::EmbeddingFailed {
                steps: done,
                c_ber: r.c_ber,
                beta: self.beta,
            });
        }
        Ok(QatControl::Continue)
    }
}

struct Controller<'a> {
    key: &'a KeyMatrix,
    bits: &'a WatermarkBits,
    schedule: BetaSchedule<'a>,
}

impl QatObserver for Controller<'_> {
    fn extra_loss(&mut self, g: &mut Graph, hooks: &QuantHooks, _step: usize) -> Result<Option<Var>> {
        if self.schedule.beta == 0.0 {
            return Ok(None);
        }
        let (w, _) = hooks
            .quantized_weight(self.key.target_layer)
            .ok_or_else(|| invalid("target layer weight was not quantized"))?;
        let e = wm_loss(g, w, self.key, self.bits)?;
        Ok(Some(g.scale(e, self.schedule.beta)?))
    }

    fn control(&mut self, model: &LicModel, ctx: &QuantContext, done: usize, nominal: usize) -> Result<QatControl> {
        if self.schedule.beta == 0.0 {
            return Ok(if done >= nominal { QatControl::Stop } else { QatControl::Continue });
        }
        if !self.schedule.wants_check(done, nominal) {
            return Ok(QatControl::Continue);
        }
        let r = extract(&simulated_weights(model, ctx, self.key.target_layer), self.key, self.bits)?;
        self.schedule.update(done, nominal, &r)
    }
}

/// Fine-tunes under `R + λD + βE` for `tc.steps` steps, continuing past that
/// until the watermark reads back exactly (or `max_steps` is hit), then
/// exports the integer model and extracts from it.
#[allow(clippy::too_many_arguments)]
pub fn qaw_finetune(
    model: &mut LicModel,
    ctx: &mut QuantContext,
    key: &KeyMatrix,
    bits: &WatermarkBits,
    data: &[Tensor],
    calibration: &[Tensor],
    tc: &TrainConfig,
    cfg: &QawConfig,
) -> Result<QawResult> {
    cfg.validate()?;
    if key.target_layer >= model.layers.len() {
        return Err(invalid(format!("target layer {} does not exist", key.target_layer)));
    }
    let n = model.layers[key.target_layer].weight.value.numel();
    if key.rows() != n || key.bits() != bits.len() {
        return Err(invalid(format!(
            "key is {}x{} but layer {} has {n} weights and the watermark {} bits",
            key.rows(),
            key.bits(),
            key.target_layer,
            bits.len()
        )));
    }
    let mut ctl = Controller {
        key,
        bits,
        schedule: BetaSchedule::new(cfg),
    };
    let trace = qat_finetune(model, ctx, data, tc, &mut ctl)?;
    let quantized = QuantizedModel::export(model, ctx, calibration)?;
    let report = extract_quantized(&quantized, key, bits)?;
    Ok(QawResult {
        quantized,
        steps: trace.len(),
        trace,
        beta_trace: ctl.schedule.trace,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{LicConfig, TrainConfig};
    use crate::image::synthetic_corpus;
    use crate::quantizer::calibrate;
    use crate::watermark::{chance_band, derive_watermark};

    fn setup() -> (LicModel, QuantContext, Vec<Tensor>) {
        let model = LicModel::new(
            LicConfig {
                stages: 2,
                channels: 8,
                ..LicConfig::default()
            },
            3,
        )
        .unwrap();
        let data = synthetic_corpus(4, 16, 2);
        let ctx = QuantContext::new(&model, &calibrate(&model, &data).unwrap()).unwrap();
        (model, ctx, data)
    }

    fn tc(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            crop: 16,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn beta_table_lookup() {
        assert_eq!(default_beta(0.01), 0.05);
        assert_eq!(default_beta(0.001), 0.01);
        assert_eq!(default_beta(0.2), 0.1);
        assert_eq!(default_beta(0.004), 0.02);
    }

    #[test]
    fn embeds_and_survives_export() {
        let (mut model, mut ctx, data) = setup();
        let cfg = QawConfig {
            bits: 32,
            check_interval: 10,
            ..QawConfig::default()
        };
        let t = cfg.target(&model).unwrap();
        assert_eq!(t, 3);
        let key = KeyMatrix::for_model(7, &model, t, 32).unwrap();
        let bits = derive_watermark(b"client", b"salt", 32).unwrap();
        let r = qaw_finetune(&mut model, &mut ctx, &key, &bits, &data, &data, &tc(40), &cfg).unwrap();
        assert_eq!(r.report.c_ber, 100.0);
        assert!(r.steps >= 40);
        assert!(r.beta_trace.iter().all(|b| b.beta >= cfg.beta_floor));
        for w in r.beta_trace.windows(2) {
            if w[1].c_ber < 100.0 {
                assert!(w[1].beta > w[0].beta);
            }
        }
        assert!(beta_trace_csv(&r.beta_trace).starts_with("step,beta,c_ber\n"));
    }

    #[test]
    fn zero_beta_is_plain_qat() {
        let (model, ctx, data) = setup();
        let cfg = QawConfig {
            beta: 0.0,
            bits: 32,
            ..QawConfig::default()
        };
        let key = KeyMatrix::for_model(7, &model, 3, 32).unwrap();
        let bits = derive_watermark(b"client", b"salt", 32).unwrap();
        let (mut m1, mut c1) = (model.clone(), ctx.clone());
        let r = qaw_finetune(&mut m1, &mut c1, &key, &bits, &data, &data, &tc(5), &cfg).unwrap();
        let (mut m2, mut c2) = (model, ctx);
        let plain = qat_finetune(&mut m2, &mut c2, &data, &tc(5), &mut crate::quantizer::NoObserver).unwrap();
        assert_eq!(r.trace, plain);
        assert_eq!(m1, m2);
        let (lo, hi) = chance_band(32);
        assert!(r.report.c_ber >= lo && r.report.c_ber <= hi, "{}", r.report.c_ber);
    }

    #[test]
    fn rejects_mismatched_key_and_bad_config() {
        let (mut model, mut ctx, data) = setup();
        let key = KeyMatrix::for_model(7, &model, 2, 32).unwrap();
        let bits = derive_watermark(b"client", b"salt", 32).unwrap();
        let cfg = QawConfig::default();
        let wrong = KeyMatrix { target_layer: 3, ..key };
        assert!(qaw_finetune(&mut model, &mut ctx, &wrong, &bits, &data, &data, &tc(1), &cfg).is_err());
        let bad = QawConfig {
            raise: 0.9,
            ..QawConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn failure_is_reported() {
        let (mut model, mut ctx, data) = setup();
        let cfg = QawConfig {
            beta: 1e-9,
            raise: 1.01,
            bits: 32,
            max_steps: 3,
            ..QawConfig::default()
        };
        let key = KeyMatrix::for_model(7, &model, 3, 32).unwrap();
        let bits = derive_watermark(b"client", b"salt", 32).unwrap();
        match qaw_finetune(&mut model, &mut ctx, &key, &bits, &data, &data, &tc(2), &cfg) {
            Err(Error::EmbeddingFailed { steps, .. }) => assert_eq!(steps, 3),
            other => panic!("{:?}", other.map(|r| r.report)),
        }
    }
}
