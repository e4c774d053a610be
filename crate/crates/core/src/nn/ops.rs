//! Forward and backward kernels for the differentiable operators.

use super::kernels::{col2im, im2col, matmul_acc, matmul_nt_acc, matmul_tn_acc, ConvGeom};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
}

fn conv_shape(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<ConvShape> {
    let (b, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(shape_err(
            "conv2d",
            format!("input has {c} channels, weight expects {wc}"),
        ));
    }
    if kh != kw {
        return Err(shape_err("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if bias.shape() != [o] {
        return Err(shape_err(
            "conv2d",
            format!("bias shape {:?}, expected [{o}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be >= 1"));
    }
    let geom = ConvGeom::forward(c, h, w, kh, stride, pad).ok_or_else(|| {
        shape_err(
            "conv2d",
            format!("kernel {kh} larger than padded input {h}x{w} (pad {pad})"),
        )
    })?;
    Ok(ConvShape {
        batch: b,
        in_ch: c,
        out_ch: o,
        geom,
    })
}

/// Cross-correlation of `[B,C,H,W]` with `[O,C,k,k]` plus per-channel bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(conv2d_forward(input, weight, bias, stride, pad, false)?.0)
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<f64>>, ConvShape)> {
    let s = conv_shape(input, weight, bias, stride, pad)?;
    let g = s.geom;
    let (rows, n) = (g.rows(), g.cols());
    let mut out = vec![0.0; s.batch * s.out_ch * n];
    let mut saved = keep_cols.then(|| vec![0.0; s.batch * rows * n]);
    let mut scratch = vec![0.0; rows * n];
    for bi in 0..s.batch {
        let x = &input.data()[bi * g.image_len()..(bi + 1) * g.image_len()];
        let cols: &mut [f64] = match saved.as_mut() {
            Some(all) => &mut all[bi * rows * n..(bi + 1) * rows * n],
            None => &mut scratch,
        };
        im2col(&g, x, cols);
        let y = &mut out[bi * s.out_ch * n..(bi + 1) * s.out_ch * n];
        matmul_acc(s.out_ch, rows, n, weight.data(), cols, y);
        for (o, row) in y.chunks_exact_mut(n).enumerate() {
            let bv = bias.data()[o];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    let t = Tensor::from_parts(vec![s.batch, s.out_ch, g.out_height, g.out_width], out);
    Ok((t, saved, s))
}

/// Gradients of conv2d. `cols` is required when the weight gradient is requested.
pub(crate) fn conv2d_backward(
    s: &ConvShape,
    grad_out: &Tensor,
    weight: &Tensor,
    cols: Option<&[f64]>,
    need_input: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let g = s.geom;
    let (rows, n) = (g.rows(), g.cols());
    let mut dw = cols.map(|_| vec![0.0; s.out_ch * rows]);
    let mut dx = need_input.then(|| vec![0.0; s.batch * g.image_len()]);
    let mut db = vec![0.0; s.out_ch];
    let mut dcols = vec![0.0; rows * n];
    for bi in 0..s.batch {
        let dy = &grad_out.data()[bi * s.out_ch * n..(bi + 1) * s.out_ch * n];
        for (o, row) in dy.chunks_exact(n).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if let (Some(dw), Some(cols)) = (dw.as_mut(), cols) {
            let c = &cols[bi * rows * n..(bi + 1) * rows * n];
            matmul_nt_acc(s.out_ch, n, rows, dy, c, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            matmul_tn_acc(rows, s.out_ch, n, weight.data(), dy, &mut dcols);
            col2im(
                &g,
                &dcols,
                &mut dx[bi * g.image_len()..(bi + 1) * g.image_len()],
            );
        }
    }
    (
        dx.map(|d| Tensor::from_parts(vec![s.batch, s.in_ch, g.height, g.width], d)),
        dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        Tensor::from_parts(vec![s.out_ch], db),
    )
}

fn conv_t_shape(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvShape> {
    let (b, ci, h, w) = input.dims4()?;
    let (wci, co, kh, kw) = weight.dims4()?;
    if wci != ci {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input has {ci} channels, weight expects {wci}"),
        ));
    }
    if kh != kw {
        return Err(shape_err("conv_transpose2d", format!("non-square kernel {kh}x{kw}")));
    }
    if bias.shape() != [co] {
        return Err(shape_err(
            "conv_transpose2d",
            format!("bias shape {:?}, expected [{co}]", bias.shape()),
        ));
    }
    if stride == 0 || out_pad >= stride {
        return Err(shape_err(
            "conv_transpose2d",
            format!("stride {stride} / output padding {out_pad} invalid"),
        ));
    }
    let span = |d: usize| ((d - 1) * stride + kh + out_pad).checked_sub(2 * pad).filter(|&v| v > 0);
    let (ho, wo) = match (span(h), span(w)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(shape_err(
                "conv_transpose2d",
                format!("padding {pad} too large for {h}x{w} input"),
            ))
        }
    };
    let geom = ConvGeom::forward(co, ho, wo, kh, stride, pad)
        .filter(|g| g.out_height == h && g.out_width == w)
        .ok_or_else(|| shape_err("conv_transpose2d", "inconsistent geometry"))?;
    Ok(ConvShape {
        batch: b,
        in_ch: ci,
        out_ch: co,
        geom,
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] for a shared `[Ci,Co,k,k]` weight.
/// Output extent is `(H-1)·stride - 2·pad + k + out_pad`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    Ok(conv_t_forward(input, weight, bias, stride, pad, out_pad)?.0)
}

pub(crate) fn conv_t_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<(Tensor, ConvShape)> {
    let s = conv_t_shape(input, weight, bias, stride, pad, out_pad)?;
    let g = s.geom;
    let (rows, n) = (g.rows(), g.cols());
    let mut out = vec![0.0; s.batch * g.image_len()];
    let mut cols = vec![0.0; rows * n];
    for bi in 0..s.batch {
        let x = &input.data()[bi * s.in_ch * n..(bi + 1) * s.in_ch * n];
        cols.fill(0.0);
        matmul_tn_acc(rows, s.in_ch, n, weight.data(), x, &mut cols);
        let y = &mut out[bi * g.image_len()..(bi + 1) * g.image_len()];
        col2im(&g, &cols, y);
        let plane = g.height * g.width;
        for (c, ch) in y.chunks_exact_mut(plane).enumerate() {
            let bv = bias.data()[c];
            ch.iter_mut().for_each(|v| *v += bv);
        }
    }
    let t = Tensor::from_parts(vec![s.batch, s.out_ch, g.height, g.width], out);
    Ok((t, s))
}

pub(crate) fn conv_t_backward(
    s: &ConvShape,
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let g = s.geom;
    let (rows, n) = (g.rows(), g.cols());
    let plane = g.height * g.width;
    let mut dx = need_input.then(|| vec![0.0; s.batch * s.in_ch * n]);
    let mut dw = need_weight.then(|| vec![0.0; s.in_ch * rows]);
    let mut db = vec![0.0; s.out_ch];
    let mut dcols = vec![0.0; rows * n];
    for bi in 0..s.batch {
        let dy = &grad_out.data()[bi * g.image_len()..(bi + 1) * g.image_len()];
        for (c, ch) in dy.chunks_exact(plane).enumerate() {
            db[c] += ch.iter().sum::<f64>();
        }
        im2col(&g, dy, &mut dcols);
        if let Some(dx) = dx.as_mut() {
            matmul_acc(
                s.in_ch,
                rows,
                n,
                weight.data(),
                &dcols,
                &mut dx[bi * s.in_ch * n..(bi + 1) * s.in_ch * n],
            );
        }
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[bi * s.in_ch * n..(bi + 1) * s.in_ch * n];
            matmul_nt_acc(s.in_ch, n, rows, x, &dcols, dw);
        }
    }
    (
        dx.map(|d| Tensor::from_parts(vec![s.batch, s.in_ch, g.out_height, g.out_width], d)),
        dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        Tensor::from_parts(vec![s.out_ch], db),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Round half away from zero; the single rounding rule used by every quantizer.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `clip(round(x / s), qmin, qmax)` as an integer-valued float.
#[inline]
pub fn quantize_value(x: f64, scale: f64, qmin: f64, qmax: f64) -> f64 {
    round_half_away(x / scale).clamp(qmin, qmax)
}
