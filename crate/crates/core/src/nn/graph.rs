//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.

use std::sync::Arc;

use super::logistic::bin_bits_with_grads;
use super::ops::{self, ConvShape};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    SumSquares(Var),
    Conv2d { x: Var, w: Var, b: Var, shape: ConvShape, cols: Option<Vec<f64>> },
    ConvT { x: Var, w: Var, b: Var, shape: ConvShape },
    Project { key: Arc<Tensor>, v: Var },
    FakeQuant { x: Var, scale: Var, qmin: f64, qmax: f64 },
    FakeQuantFixed { x: Var, scale: f64, qmin: f64, qmax: f64 },
    RoundToStep { x: Var },
    RateBits { z: Var, mu: Var, log_b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng, "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng, "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = ops::relu(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng, "relu")
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp { x: a, lo, hi }, ng, "clamp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        let ng = self.needs(a);
        self.push(v, Op::SumSquares(a), ng, "sum_squares")
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let n = self.value(d).numel() as f64;
        let s = self.sum_squares(d)?;
        self.scale(s, 1.0 / n)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let keep = self.needs(w);
        let (out, cols, shape) =
            ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad, keep)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, shape, cols }, ng, "conv2d")
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (out, shape) = ops::conv_t_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            out_pad,
        )?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::ConvT { x, w, b, shape }, ng, "conv_transpose2d")
    }

    /// `keyᵀ · vec(v)` for a `[N, M]` key and any `v` with N elements; yields `[M]`.
    pub fn project(&mut self, key: Arc<Tensor>, v: Var) -> Result<Var> {
        let (n, m) = match key.shape() {
            [n, m] => (*n, *m),
            s => return Err(shape_err("project", format!("key must be 2-d, got {s:?}"))),
        };
        let flat = self.value(v).data();
        if flat.len() != n {
            return Err(shape_err(
                "project",
                format!("key has {n} rows, tensor has {} elements", flat.len()),
            ));
        }
        let out = project_values(&key, flat, m);
        let ng = self.needs(v);
        self.push(Tensor::from_parts(vec![m], out), Op::Project { key, v }, ng, "project")
    }

    /// `clip(round(x/s), qmin, qmax) · s` with a learnable scalar scale.
    /// Straight-through for `x` inside the clip range, LSQ-style gradient for `s`.
    pub fn fake_quant(&mut self, x: Var, scale: Var, qmin: f64, qmax: f64) -> Result<Var> {
        if !self.value(scale).is_scalar() {
            return Err(shape_err("fake_quant", "scale must be a scalar"));
        }
        let s = self.value(scale).item();
        if s.is_nan() || s <= 0.0 {
            return Err(Error::InvalidArgument(format!("fake_quant scale {s} must be > 0")));
        }
        let v = self.value(x).map(|t| ops::quantize_value(t, s, qmin, qmax) * s);
        let ng = self.needs(x) || self.needs(scale);
        self.push(v, Op::FakeQuant { x, scale, qmin, qmax }, ng, "fake_quant")
    }

    /// Fake quantization with a constant scale (activations).
    pub fn fake_quant_fixed(&mut self, x: Var, scale: f64, qmin: f64, qmax: f64) -> Result<Var> {
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("fake_quant scale {scale} must be > 0")));
        }
        let v = self.value(x).map(|t| ops::quantize_value(t, scale, qmin, qmax) * scale);
        let ng = self.needs(x);
        self.push(v, Op::FakeQuantFixed { x, scale, qmin, qmax }, ng, "fake_quant")
    }

    /// Rounds onto the grid `k · step` with a straight-through gradient.
    pub fn round_to_step(&mut self, x: Var, step: f64) -> Result<Var> {
        if step.is_nan() || step <= 0.0 {
            return Err(Error::InvalidArgument(format!("round step {step} must be > 0")));
        }
        let v = self.value(x).map(|t| ops::round_half_away(t / step) * step);
        let ng = self.needs(x);
        self.push(v, Op::RoundToStep { x }, ng, "round_to_step")
    }

    /// Total bits of a `[B, C, H, W]` latent under a per-channel logistic prior.
    pub fn rate_bits(&mut self, z: Var, mu: Var, log_b: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(z).dims4()?;
        if self.value(mu).shape() != [c] || self.value(log_b).shape() != [c] {
            return Err(shape_err(
                "rate_bits",
                format!("prior parameters must have shape [{c}]"),
            ));
        }
        let plane = h * w;
        let (zv, mv, bv) = (self.value(z), self.value(mu), self.value(log_b));
        let mut total = 0.0;
        for (i, &x) in zv.data().iter().enumerate() {
            let ch = (i / plane) % c;
            total += bin_bits_with_grads(x, mv.data()[ch], bv.data()[ch]).0;
        }
        let ng = self.needs(z) || self.needs(mu) || self.needs(log_b);
        self.push(Tensor::scalar(total), Op::RateBits { z, mu, log_b }, ng, "rate_bits")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&t, 1.0),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_with(g, vb, |x, y| x * y));
                acc(*b, zip_with(g, va, |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Exp(a) => acc(*a, zip_with(g, &node.value, |x, y| x * y)),
            Op::Relu(a) => {
                let t = zip_with(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(*a, t);
            }
            Op::Clamp { x, lo, hi } => {
                let t = zip_with(g, self.value(*x), |gv, v| {
                    if v > *lo && v < *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                acc(*x, t);
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::SumSquares(a) => {
                let gv = g.item();
                acc(*a, self.value(*a).map(|x| 2.0 * gv * x));
            }
            Op::Conv2d { x, w, b, shape, cols } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    shape,
                    g,
                    self.value(*w),
                    cols.as_deref(),
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                acc(*b, db);
            }
            Op::ConvT { x, w, b, shape } => {
                let (dx, dw, db) = ops::conv_t_backward(
                    shape,
                    g,
                    self.value(*x),
                    self.value(*w),
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                acc(*b, db);
            }
            Op::Project { key, v } => {
                let (n, m) = (key.shape()[0], key.shape()[1]);
                let kd = key.data();
                let gd = g.data();
                let out: Vec<f64> = (0..n)
                    .map(|i| kd[i * m..(i + 1) * m].iter().zip(gd).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*v, Tensor::from_parts(self.value(*v).shape().to_vec(), out));
            }
            Op::FakeQuant { x, scale, qmin, qmax } => {
                let s = self.value(*scale).item();
                let xv = self.value(*x);
                let mut ds = 0.0;
                let mut dx = Vec::with_capacity(xv.numel());
                for (&t, &gv) in xv.data().iter().zip(g.data()) {
                    let r = t / s;
                    if r < *qmin {
                        ds += gv * qmin;
                        dx.push(0.0);
                    } else if r > *qmax {
                        ds += gv * qmax;
                        dx.push(0.0);
                    } else {
                        ds += gv * (ops::round_half_away(r) - r);
                        dx.push(gv);
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(*scale, Tensor::from_parts(self.value(*scale).shape().to_vec(), vec![ds]));
            }
            Op::FakeQuantFixed { x, scale, qmin, qmax } => {
                let t = zip_with(g, self.value(*x), |gv, v| {
                    let r = v / scale;
                    if r < *qmin || r > *qmax {
                        0.0
                    } else {
                        gv
                    }
                });
                acc(*x, t);
            }
            Op::RoundToStep { x } => acc(*x, g.clone()),
            Op::RateBits { z, mu, log_b } => {
                let gv = g.item();
                let zv = self.value(*z);
                let (_, c, h, w) = zv.dims4()?;
                let plane = h * w;
                let (mv, bv) = (self.value(*mu), self.value(*log_b));
                let mut dz = Vec::with_capacity(zv.numel());
                let mut dmu = vec![0.0; c];
                let mut dlb = vec![0.0; c];
                for (i, &x) in zv.data().iter().enumerate() {
                    let ch = (i / plane) % c;
                    let (_, gx, gb) = bin_bits_with_grads(x, mv.data()[ch], bv.data()[ch]);
                    dz.push(gv * gx);
                    dmu[ch] -= gv * gx;
                    dlb[ch] += gv * gb;
                }
                acc(*z, Tensor::from_parts(zv.shape().to_vec(), dz));
                acc(*mu, Tensor::from_parts(vec![c], dmu));
                acc(*log_b, Tensor::from_parts(vec![c], dlb));
            }
        }
        Ok(())
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// `keyᵀ · v` for a row-major `[N, M]` key.
pub fn project_values(key: &Tensor, v: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (row, &x) in key.data().chunks_exact(m).zip(v) {
        for (o, &k) in out.iter_mut().zip(row) {
            *o += k * x;
        }
    }
    out
}
