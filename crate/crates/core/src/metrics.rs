//! Image quality and rate-distortion curve metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Reported for exact matches instead of infinity.
pub const DB_CAP: f64 = 100.0;

fn mse(x: &Tensor, y: &Tensor, op: &'static str) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.numel() as f64)
}

/// `10·log10(1/MSE)` for unit-range images, capped at 100 dB.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    let m = mse(x, y, "psnr")?;
    if m == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(DB_CAP))
}

const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const SIGMA: f64 = 1.5;

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of an `h × w` plane.
fn filter(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..k).map(|t| g[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|t| g[t] * tmp[(y + t) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let g = gaussian(11.min(h).min(w));
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (ma, ho, wo) = filter(a, h, w, &g);
    let (mb, _, _) = filter(b, h, w, &g);
    let (saa, _, _) = filter(&prod(|x, _| x * x), h, w, &g);
    let (sbb, _, _) = filter(&prod(|_, y| y * y), h, w, &g);
    let (sab, _, _) = filter(&prod(|x, y| x * y), h, w, &g);
    let n = (ho * wo) as f64;
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..ho * wo {
        let va = saa[i] - ma[i] * ma[i];
        let vb = sbb[i] - mb[i] * mb[i];
        let cov = sab[i] - ma[i] * mb[i];
        l += (2.0 * ma[i] * mb[i] + C1) / (ma[i] * ma[i] + mb[i] * mb[i] + C1);
        cs += (2.0 * cov + C2) / (va + vb + C2);
    }
    (l / n, cs / n)
}

fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let i = 2 * y * w + 2 * x;
            out[y * wo + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, ho, wo)
}

/// Five-scale MS-SSIM of unit-range images, averaged over channels.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err("ms_ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (b, c, h, w) = x.dims4()?;
    if h.min(w) < 32 {
        return Err(invalid(format!("MS-SSIM needs at least 32x32 pixels, got {h}x{w}")));
    }
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..b * c {
        let mut pa = x.data()[p * plane..(p + 1) * plane].to_vec();
        let mut pb = y.data()[p * plane..(p + 1) * plane].to_vec();
        let (mut hh, mut ww) = (h, w);
        let mut score = 1.0;
        for (s, &weight) in MS_WEIGHTS.iter().enumerate() {
            let (l, cs) = ssim_terms(&pa, &pb, hh, ww);
            let term = if s + 1 == MS_WEIGHTS.len() { l * cs } else { cs };
            score *= term.max(0.0).powf(weight);
            if s + 1 < MS_WEIGHTS.len() {
                let (na, nh, nw) = downsample(&pa, hh, ww);
                pb = downsample(&pb, hh, ww).0;
                pa = na;
                hh = nh;
                ww = nw;
            }
        }
        total += score;
    }
    Ok((total / (b * c) as f64).min(1.0))
}

/// `-10·log10(1 - score)`, capped at 100 dB.
pub fn msssim_db(score: f64) -> f64 {
    if score >= 1.0 {
        return DB_CAP;
    }
    (-10.0 * (1.0 - score).log10()).min(DB_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Points sorted by strictly increasing rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(invalid(format!("an RD curve needs at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|p| !(p.bpp.is_finite() && p.bpp > 0.0 && p.psnr.is_finite())) {
            return Err(invalid("RD points need finite positive rate and finite quality"));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(invalid("RD curve rates must be strictly increasing"));
        }
        Ok(RdCurve { points })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(bpp, psnr)| RdPoint { bpp, psnr, msssim: 1.0 })
                .collect(),
        )
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bpp,psnr_db,msssim,msssim_db\n");
        for p in &self.points {
            s.push_str(&format!("{:.6},{:.4},{:.6},{:.4}\n", p.bpp, p.psnr, p.msssim, msssim_db(p.msssim)));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BdMethod {
    /// Least-squares cubic polynomial.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite interpolation.
    Pchip,
}

/// A fitted 1-d curve that can be integrated over an interval.
enum Fit {
    Poly { coef: [f64; 4], mean: f64, scale: f64 },
    Pchip { x: Vec<f64>, y: Vec<f64>, d: Vec<f64> },
}

fn solve4(mut a: [[f64; 5]; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-300 {
            return Err(invalid("degenerate RD curve (repeated abscissae)"));
        }
        a.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..5 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    Ok([a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]])
}

impl Fit {
    fn new(x: &[f64], y: &[f64], method: BdMethod) -> Result<Fit> {
        match method {
            BdMethod::Cubic => {
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                let scale = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
                let mut a = [[0.0; 5]; 4];
                for (&xi, &yi) in x.iter().zip(y) {
                    let u = (xi - mean) / scale;
                    let pw = [1.0, u, u * u, u * u * u];
                    for r in 0..4 {
                        for c in 0..4 {
                            a[r][c] += pw[r] * pw[c];
                        }
                        a[r][4] += pw[r] * yi;
                    }
                }
                Ok(Fit::Poly {
                    coef: solve4(a)?,
                    mean,
                    scale,
                })
            }
            BdMethod::Pchip => {
                let mut idx: Vec<usize> = (0..x.len()).collect();
                idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
                let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
                let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                if xs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(invalid("degenerate RD curve (repeated abscissae)"));
                }
                let d = pchip_slopes(&xs, &ys);
                Ok(Fit::Pchip { x: xs, y: ys, d })
            }
        }
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Fit::Poly { coef, mean, scale } => {
                let prim = |v: f64| {
                    let u = (v - mean) / scale;
                    scale * (coef[0] * u + coef[1] * u * u / 2.0 + coef[2] * u.powi(3) / 3.0 + coef[3] * u.powi(4) / 4.0)
                };
                prim(hi) - prim(lo)
            }
            Fit::Pchip { x, y, d } => {
                // Three-point Gauss-Legendre is exact on each cubic piece.
                let nodes = [(-(0.6f64).sqrt(), 5.0 / 9.0), (0.0, 8.0 / 9.0), ((0.6f64).sqrt(), 5.0 / 9.0)];
                let mut total = 0.0;
                for k in 0..x.len() - 1 {
                    let (a, b) = (x[k].max(lo), x[k + 1].min(hi));
                    if b <= a {
                        continue;
                    }
                    let (c, r) = ((a + b) / 2.0, (b - a) / 2.0);
                    for (t, wt) in nodes {
                        total += wt * r * hermite(x[k], x[k + 1], y[k], y[k + 1], d[k], d[k + 1], c + r * t);
                    }
                }
                total
            }
        }
    }
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, v: f64) -> f64 {
    let h = x1 - x0;
    let t = (v - x0) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// Fritsch-Carlson monotone slopes with the usual three-point end conditions.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    if n == 2 {
        d[0] = del[0];
        d[1] = del[0];
    } else {
        d[0] = end(h[0], h[1], del[0], del[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    }
    d
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let lo = a.iter().cloned().fold(f64::INFINITY, f64::min).max(b.iter().cloned().fold(f64::INFINITY, f64::min));
    let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(b.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if !(hi > lo) {
        return Err(invalid("RD curves do not overlap"));
    }
    Ok((lo, hi))
}

fn log_rates(c: &RdCurve) -> Vec<f64> {
    c.points.iter().map(|p| p.bpp.log10()).collect()
}

fn psnrs(c: &RdCurve) -> Vec<f64> {
    c.points.iter().map(|p| p.psnr).collect()
}

/// Average PSNR gain of `b` over `a` across the shared log-rate interval.
pub fn bd_psnr(a: &RdCurve, b: &RdCurve, method: BdMethod) -> Result<f64> {
    let (ra, rb) = (log_rates(a), log_rates(b));
    let (lo, hi) = overlap(&ra, &rb)?;
    let fa = Fit::new(&ra, &psnrs(a), method)?;
    let fb = Fit::new(&rb, &psnrs(b), method)?;
    Ok((fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo))
}

/// Average rate change of `b` relative to `a` at equal quality, in percent.
pub fn bd_rate(a: &RdCurve, b: &RdCurve, method: BdMethod) -> Result<f64> {
    let (qa, qb) = (psnrs(a), psnrs(b));
    let (lo, hi) = overlap(&qa, &qb)?;
    let fa = Fit::new(&qa, &log_rates(a), method)?;
    let fb = Fit::new(&qb, &log_rates(b), method)?;
    let avg = (fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}
