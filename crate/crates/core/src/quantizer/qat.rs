use super::{quantize_input, QuantContext, QuantHooks};
use crate::codec::{batch_rd, diverged, report, LicModel, RdReport, Sampler, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QatControl {
    Continue,
    Stop,
}

/// Extension points of the fine-tuning loop.
pub trait QatObserver {
    /// Extra term added to `R + λ·D`.
    fn extra_loss(&mut self, _g: &mut Graph, _hooks: &QuantHooks, _step: usize) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Decides whether to run another step; `done` steps have completed.
    fn control(&mut self, _model: &LicModel, _ctx: &QuantContext, done: usize, nominal: usize) -> Result<QatControl> {
        Ok(if done >= nominal { QatControl::Stop } else { QatControl::Continue })
    }
}

/// Plain quantization-aware fine-tuning.
pub struct NoObserver;
impl QatObserver for NoObserver {}

/// Fine-tunes model weights and weight scales under fake quantization.
/// Returns the `R + λ·D` trace of every step.
pub fn qat_finetune(
    model: &mut LicModel,
    ctx: &mut QuantContext,
    data: &[Tensor],
    tc: &TrainConfig,
    observer: &mut dyn QatObserver,
) -> Result<Vec<RdReport>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if ctx.layers.len() != model.layers.len() {
        return Err(Error::InvalidArgument("quantization context does not match model".into()));
    }
    let mut sampler = Sampler::new(tc);
    let mut adam = AdamState::new(tc.adam);
    let mut trace = Vec::new();
    model.enforce_mask();
    let mut done = 0;
    while observer.control(model, ctx, done, tc.steps)? == QatControl::Continue {
        let step = done;
        let x = quantize_input(&sampler.batch(data)?);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (grads, rho_vars) = {
            let hooks = ctx.hooks(&mut g, true);
            let vars = batch_rd(model, &mut g, &bound, &x, &mut sampler, &hooks).map_err(diverged(step))?;
            trace.push(report(&g, &vars, model.config.lambda));
            let mut loss = vars.loss;
            if let Some(extra) = observer.extra_loss(&mut g, &hooks, step).map_err(diverged(step))? {
                loss = g.add(loss, extra).map_err(diverged(step))?;
            }
            (g.backward(loss)?, hooks.rho.clone())
        };
        model.load_grads(&bound, &grads);
        for (l, v) in ctx.layers.iter_mut().zip(rho_vars) {
            match grads.get(v) {
                Some(gr) => l.rho.grad = gr.clone(),
                None => l.rho.zero_grad(),
            }
        }
        model.enforce_mask();
        let mut params = model.params_mut();
        params.extend(ctx.rho_params_mut());
        adam.step(&mut params, tc.adam.lr);
        model.enforce_mask();
        done += 1;
    }
    Ok(trace)
}
