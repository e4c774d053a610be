//! Central finite-difference checks for every differentiable operator.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Reduces any output to a scalar through a fixed random weighting so that
/// every output element contributes.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    g.sum(p)
}

fn eval(build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let l = weighted(&mut g, out, 99).unwrap();
    g.value(l).item()
}

/// Largest relative gap between the analytic gradient and a central
/// difference, over every element of every input.
pub fn max_rel_error(build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let l = weighted(&mut g, out, 99).unwrap();
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Random values kept at least `gap` away from zero (for kinked ops).
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every differentiable graph operator on small random inputs, as
/// `(name, max relative error)`.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let a = rand_t(&[2, 3], 1);
    let b = rand_t(&[2, 3], 2);
    let kinked = away_from_zero(&[3, 4], 3, 0.05);
    let ab = [a.clone(), b.clone()];
    let one = [a.clone()];
    let mut out: Vec<(&'static str, f64)> = vec![
        ("add", max_rel_error(&|g, v| g.add(v[0], v[1]), &ab)),
        ("sub", max_rel_error(&|g, v| g.sub(v[0], v[1]), &ab)),
        ("mul", max_rel_error(&|g, v| g.mul(v[0], v[1]), &ab)),
        ("scale", max_rel_error(&|g, v| g.scale(v[0], -2.5), &one)),
        ("exp", max_rel_error(&|g, v| g.exp(v[0]), &one)),
        ("sum", max_rel_error(&|g, v| g.sum(v[0]), &one)),
        ("mean", max_rel_error(&|g, v| g.mean(v[0]), &one)),
        (
            "sum_squares",
            max_rel_error(&|g, v| g.sum_squares(v[0]), &one),
        ),
        ("mse", max_rel_error(&|g, v| g.mse(v[0], v[1]), &ab)),
        (
            "relu",
            max_rel_error(&|g, v| g.relu(v[0]), std::slice::from_ref(&kinked)),
        ),
        (
            "clamp",
            max_rel_error(&|g, v| g.clamp(v[0], -0.5, 0.5), &[kinked]),
        ),
    ];
    let x = rand_t(&[2, 2, 5, 5], 4);
    let w = rand_t(&[3, 2, 3, 3], 5);
    let bias = rand_t(&[3], 6);
    out.push((
        "conv2d",
        max_rel_error(&|g, v| g.conv2d(v[0], v[1], v[2], 2, 1), &[x, w, bias]),
    ));
    let wt = rand_t(&[2, 3, 5, 5], 7);
    let bt = rand_t(&[3], 8);
    let xt = rand_t(&[1, 2, 3, 3], 9);
    out.push((
        "conv_transpose2d",
        max_rel_error(
            &|g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 2, 1),
            &[xt, wt, bt],
        ),
    ));
    let key = Arc::new(rand_t(&[12, 4], 10));
    let theta = rand_t(&[3, 4], 11);
    out.push((
        "project",
        max_rel_error(&|g, v| g.project(key.clone(), v[0]), &[theta]),
    ));
    let z = rand_t(&[2, 3, 2, 2], 12).map(|v| 3.0 * v);
    let mu = rand_t(&[3], 13);
    let lb = rand_t(&[3], 14);
    out.push((
        "rate_bits",
        max_rel_error(&|g, v| g.rate_bits(v[0], v[1], v[2]), &[z, mu, lb]),
    ));
    out
}
