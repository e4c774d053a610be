use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, FloatHooks, LatentMode, LayerHooks, LicConfig, LicModel, RdReport, DISTORTION_SCALE};
use crate::error::{invalid, Error, Result};
use crate::metrics::psnr;
use crate::nn::{AdamConfig, AdamState, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Square training crop; 0 trains on whole images.
    pub crop: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            crop: 32,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Seeded batch and noise source for every training loop.
pub struct Sampler {
    rng: ChaCha8Rng,
    batch_size: usize,
    crop: usize,
}

impl Sampler {
    pub fn new(tc: &TrainConfig) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(tc.seed),
            batch_size: tc.batch_size.max(1),
            crop: tc.crop,
        }
    }

    /// Random images (with replacement), each randomly cropped.
    pub fn batch(&mut self, data: &[Tensor]) -> Result<Tensor> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut items = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let img = &data[self.rng.gen_range(0..data.len())];
            items.push(self.crop_of(img)?);
        }
        Tensor::stack(&items)
    }

    fn crop_of(&mut self, img: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = img.dims4()?;
        if self.crop == 0 || (self.crop >= h && self.crop >= w) {
            return Ok(img.clone());
        }
        let (ch, cw) = (self.crop.min(h), self.crop.min(w));
        let y0 = self.rng.gen_range(0..=h - ch);
        let x0 = self.rng.gen_range(0..=w - cw);
        let d = img.data();
        Ok(Tensor::from_fn(&[1, c, ch, cw], |i| {
            let (ci, r) = (i / (ch * cw), i % (ch * cw));
            d[(ci * h + y0 + r / cw) * w + x0 + r % cw]
        }))
    }

    pub fn noise(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -0.5, 0.5, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub struct RdVars {
    pub rate: Var,
    pub distortion: Var,
    pub loss: Var,
}

/// Builds `R + λ·D` for one batch. The latent noise is drawn from `sampler`.
pub fn batch_rd(
    model: &LicModel,
    g: &mut Graph,
    bound: &Bound,
    x: &Tensor,
    sampler: &mut Sampler,
    hooks: &dyn LayerHooks,
) -> Result<RdVars> {
    let (b, _, h, w) = x.dims4()?;
    let ts = model.config.total_stride();
    let noise = sampler.noise(&[b, model.latent_channels(), h / ts, w / ts]);
    let xv = g.constant(x.clone());
    let f = model.forward_graph(g, bound, xv, LatentMode::Noise(noise), hooks)?;
    let bits = g.rate_bits(f.latent_hat, bound.mu, bound.log_b)?;
    let rate = g.scale(bits, 1.0 / (b * h * w) as f64)?;
    let mse = g.mse(f.recon, xv)?;
    let distortion = g.scale(mse, DISTORTION_SCALE)?;
    let weighted = g.scale(distortion, model.config.lambda)?;
    let loss = g.add(rate, weighted)?;
    Ok(RdVars {
        rate,
        distortion,
        loss,
    })
}

pub(crate) fn report(g: &Graph, v: &RdVars, lambda: f64) -> RdReport {
    RdReport::new(g.value(v.rate).item(), g.value(v.distortion).item(), lambda)
}

pub(crate) fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Fresh model trained for `tc.steps` steps on the relaxed RD objective.
pub fn train(data: &[Tensor], config: &LicConfig, tc: &TrainConfig) -> Result<(LicModel, Vec<RdReport>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = LicModel::new(config.clone(), tc.seed)?;
    let trace = train_steps(&mut model, data, tc)?;
    Ok((model, trace))
}

/// Continues training `model` in place; masked channels stay at zero.
pub fn train_steps(model: &mut LicModel, data: &[Tensor], tc: &TrainConfig) -> Result<Vec<RdReport>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !(tc.adam.lr.is_finite() && tc.adam.lr > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    let mut sampler = Sampler::new(tc);
    let mut adam = AdamState::new(tc.adam);
    let mut trace = Vec::with_capacity(tc.steps);
    model.enforce_mask();
    for step in 0..tc.steps {
        let x = sampler.batch(data)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let vars = batch_rd(model, &mut g, &bound, &x, &mut sampler, &FloatHooks).map_err(diverged(step))?;
        trace.push(report(&g, &vars, model.config.lambda));
        let grads = g.backward(vars.loss).map_err(diverged(step))?;
        model.load_grads(&bound, &grads);
        model.enforce_mask();
        adam.step(&mut model.params_mut(), tc.adam.lr);
        model.enforce_mask();
    }
    Ok(trace)
}

/// Test-set figures with rounded latents: estimated rate and 8-bit PSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdEval {
    pub report: RdReport,
    /// Mean per-image PSNR in dB.
    pub psnr: f64,
}

pub fn evaluate(model: &LicModel, images: &[Tensor]) -> Result<RdEval> {
    evaluate_with(images, model.config.lambda, |x| {
        let (z, xh) = model.reconstruct(x)?;
        Ok((model.prior.total_bits(&z)?, xh))
    })
}

/// Shared evaluation loop: `run` maps an image to (bits, reconstruction).
pub fn evaluate_with(
    images: &[Tensor],
    lambda: f64,
    mut run: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<RdEval> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (mut bits, mut pixels, mut sq, mut elems, mut db) = (0.0, 0usize, 0.0, 0usize, 0.0);
    for x in images {
        let (b, xh) = run(x)?;
        let (_, _, h, w) = x.dims4()?;
        bits += b;
        pixels += h * w;
        sq += x.data().iter().zip(xh.data()).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        elems += x.numel();
        db += psnr(x, &xh)?;
    }
    Ok(RdEval {
        report: RdReport::new(bits / pixels as f64, DISTORTION_SCALE * sq / elems as f64, lambda),
        psnr: db / images.len() as f64,
    })
}
