//! Channel-wise prune-and-finetune with physical compaction and MAC accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{evaluate, train_steps, LicModel, TrainConfig};
use crate::error::{invalid, shape_err, Result};
use crate::nn::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSchedule {
    pub per_iteration_ratio: f64,
    pub iterations: usize,
    pub finetune: TrainConfig,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            per_iteration_ratio: 0.1,
            iterations: 3,
            finetune: TrainConfig {
                steps: 200,
                ..TrainConfig::default()
            },
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.per_iteration_ratio) {
            return Err(invalid(format!("prune ratio {} must be in [0, 1)", self.per_iteration_ratio)));
        }
        Ok(())
    }

    /// `1 - (1 - r)^iterations`.
    pub fn cumulative_ratio(&self) -> f64 {
        1.0 - (1.0 - self.per_iteration_ratio).powi(self.iterations as i32)
    }
}

/// Keep flags over each layer's output channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    pub keep: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn full(model: &LicModel) -> Self {
        ChannelMask {
            keep: model.layers.iter().map(|l| vec![true; l.out_ch]).collect(),
        }
    }

    pub fn validate(&self, model: &LicModel) -> Result<()> {
        if self.keep.len() != model.layers.len() {
            return Err(shape_err("mask", "one keep-vector per layer is required"));
        }
        for (i, (k, l)) in self.keep.iter().zip(&model.layers).enumerate() {
            if k.len() != l.out_ch {
                return Err(shape_err("mask", format!("layer {i}: {} flags for {} channels", k.len(), l.out_ch)));
            }
            if !k.iter().any(|&b| b) {
                return Err(invalid(format!("layer {i} keeps no channels")));
            }
        }
        if !self.keep[model.layers.len() - 1].iter().all(|&b| b) {
            return Err(invalid("output layer channels cannot be pruned"));
        }
        Ok(())
    }

    pub fn kept(&self, layer: usize) -> usize {
        self.keep[layer].iter().filter(|&&b| b).count()
    }

    /// Zeroes value and gradient of every masked filter and its bias.
    pub fn apply(&self, model: &mut LicModel) {
        for (l, keep) in model.layers.iter_mut().zip(&self.keep) {
            for (o, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
                for i in l.output_filter_indices(o) {
                    l.weight.value.data_mut()[i] = 0.0;
                    l.weight.grad.data_mut()[i] = 0.0;
                }
                l.bias.value.data_mut()[o] = 0.0;
                l.bias.grad.data_mut()[o] = 0.0;
            }
        }
    }
}

/// L2 norm of every output filter, per layer.
pub fn rank_channels(model: &LicModel) -> Vec<Vec<f64>> {
    model
        .layers
        .iter()
        .map(|l| {
            let w = l.weight.value.data();
            (0..l.out_ch)
                .map(|o| l.output_filter_indices(o).iter().map(|&i| w[i] * w[i]).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// Masks the `⌈ratio · active⌉` lowest-norm active channels of every layer except the output layer.
pub fn select_channels(model: &LicModel, ratio: f64) -> Result<ChannelMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(format!("prune ratio {ratio} must be in [0, 1)")));
    }
    let mut mask = model.mask.clone().unwrap_or_else(|| ChannelMask::full(model));
    let scores = rank_channels(model);
    let last = model.layers.len() - 1;
    for (li, score) in scores.iter().enumerate().take(last) {
        let mut active: Vec<usize> = (0..score.len()).filter(|&o| mask.keep[li][o]).collect();
        let n = (ratio * active.len() as f64).ceil() as usize;
        if n >= active.len() {
            return Err(invalid(format!(
                "pruning {n} of {} active channels would empty layer {li}",
                active.len()
            )));
        }
        // Stable sort: ties keep the lower channel index ahead.
        active.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
        for &o in &active[..n] {
            mask.keep[li][o] = false;
        }
    }
    Ok(mask)
}

/// One prune step followed by masked fine-tuning on the RD loss.
pub fn prune_iteration(model: &mut LicModel, ratio: f64, data: &[Tensor], finetune: &TrainConfig) -> Result<()> {
    let mask = select_channels(model, ratio)?;
    mask.validate(model)?;
    model.mask = Some(mask);
    model.pruned = true;
    model.enforce_mask();
    train_steps(model, data, finetune)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub iteration: usize,
    pub kept_channels: Vec<usize>,
    pub nonzero_params: usize,
    pub macs: u64,
    pub rate: f64,
    pub distortion: f64,
    pub loss: f64,
    pub psnr: f64,
}

/// Runs the full schedule. Row 0 of the report is the unpruned model.
pub fn prune(
    model: &mut LicModel,
    schedule: &PruneSchedule,
    data: &[Tensor],
    eval: &[Tensor],
) -> Result<Vec<PruneReport>> {
    schedule.validate()?;
    let shape = eval
        .first()
        .map(|t| t.shape().to_vec())
        .unwrap_or_else(|| vec![1, 3, 64, 64]);
    let row = |m: &LicModel, iteration: usize| -> Result<PruneReport> {
        let e = evaluate(m, eval)?;
        let mask = m.mask.clone().unwrap_or_else(|| ChannelMask::full(m));
        Ok(PruneReport {
            iteration,
            kept_channels: (0..m.layers.len()).map(|i| mask.kept(i)).collect(),
            nonzero_params: m.nonzero_param_count(),
            macs: count_flops(m, &shape)?,
            rate: e.report.rate,
            distortion: e.report.distortion,
            loss: e.report.loss,
            psnr: e.psnr,
        })
    };
    let mut out = vec![row(model, 0)?];
    for it in 1..=schedule.iterations {
        let ft = TrainConfig {
            seed: schedule.finetune.seed.wrapping_add(it as u64),
            ..schedule.finetune.clone()
        };
        prune_iteration(model, schedule.per_iteration_ratio, data, &ft)?;
        out.push(row(model, it)?);
    }
    Ok(out)
}

pub fn report_csv(rows: &[PruneReport]) -> String {
    let mut s = String::from("iteration,kept_channels,nonzero_params,macs,rate_bpp,distortion,loss,psnr_db\n");
    for r in rows {
        let kept: Vec<String> = r.kept_channels.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.4}",
            r.iteration,
            kept.join(";"),
            r.nonzero_params,
            r.macs,
            r.rate,
            r.distortion,
            r.loss,
            r.psnr
        );
    }
    s
}

/// Physically removes masked channels and the matching input slices of consumers.
pub fn compact(model: &LicModel) -> Result<LicModel> {
    let Some(mask) = &model.mask else {
        let mut m = model.clone();
        m.mask = None;
        return Ok(m);
    };
    mask.validate(model)?;
    let mut out = model.clone();
    let mut in_keep: Vec<usize> = (0..model.layers[0].in_ch).collect();
    for (li, layer) in model.layers.iter().enumerate() {
        let out_keep: Vec<usize> = (0..layer.out_ch).filter(|&o| mask.keep[li][o]).collect();
        let k2 = layer.kernel * layer.kernel;
        let w = layer.weight.value.data();
        let mut data = Vec::with_capacity(in_keep.len() * out_keep.len() * k2);
        match layer.kind {
            crate::codec::LayerKind::Conv => {
                for &o in &out_keep {
                    for &i in &in_keep {
                        let base = (o * layer.in_ch + i) * k2;
                        data.extend_from_slice(&w[base..base + k2]);
                    }
                }
            }
            crate::codec::LayerKind::ConvTranspose => {
                for &i in &in_keep {
                    for &o in &out_keep {
                        let base = (i * layer.out_ch + o) * k2;
                        data.extend_from_slice(&w[base..base + k2]);
                    }
                }
            }
        }
        let shape = crate::codec::ConvLayer::weight_shape(layer.kind, in_keep.len(), out_keep.len(), layer.kernel);
        let bias: Vec<f64> = out_keep.iter().map(|&o| layer.bias.value.data()[o]).collect();
        let dst = &mut out.layers[li];
        dst.in_ch = in_keep.len();
        dst.out_ch = out_keep.len();
        dst.weight = Parameter::new(Tensor::new(shape.to_vec(), data)?);
        dst.bias = Parameter::new(Tensor::new(vec![out_keep.len()], bias)?);
        if li + 1 == model.encoder_len {
            out.prior = model.prior.select(&out_keep);
        }
        in_keep = out_keep;
    }
    out.mask = None;
    out.pruned = true;
    Ok(out)
}

/// Multiply-accumulates of one forward pass on `input_shape` (`[B, C, H, W]`).
/// Masked output channels are not counted.
pub fn count_flops(model: &LicModel, input_shape: &[usize]) -> Result<u64> {
    Ok(layer_flops(model, input_shape)?.iter().sum())
}

pub fn layer_flops(model: &LicModel, input_shape: &[usize]) -> Result<Vec<u64>> {
    model.check_input(input_shape)?;
    let (b, mut h, mut w) = (input_shape[0] as u64, input_shape[2], input_shape[3]);
    let mut out = Vec::with_capacity(model.layers.len());
    for (li, l) in model.layers.iter().enumerate() {
        let active = model.mask.as_ref().map_or(l.out_ch, |m| m.kept(li));
        let (macs, ho, wo) = l.macs(h, w, active);
        out.push(b * macs);
        h = ho;
        w = wo;
    }
    Ok(out)
}
