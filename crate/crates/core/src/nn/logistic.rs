//! Logistic bin probabilities for the factorized entropy model.

use std::f64::consts::LN_2;

/// Smallest probability charged to any symbol (2^-24).
pub const PROB_FLOOR: f64 = 1.0 / 16_777_216.0;

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// σ'(u) = σ(u)(1 - σ(u)), evaluated without cancellation.
#[inline]
fn sigmoid_slope(u: f64) -> f64 {
    let e = (-u.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Logistic CDF with location `mu` and scale `b`.
#[inline]
pub fn cdf(x: f64, mu: f64, b: f64) -> f64 {
    sigmoid((x - mu) / b)
}

/// Mass of the unit bin centred at `x`: `C(x + 1/2) - C(x - 1/2)`.
pub fn bin_probability(x: f64, mu: f64, b: f64) -> f64 {
    // Symmetric in (x - mu); evaluating on the left tail keeps both CDF values small.
    let d = -(x - mu).abs();
    sigmoid((d + 0.5) / b) - sigmoid((d - 0.5) / b)
}

/// Bits charged to the bin at `x` and the derivatives with respect to
/// `x` and `log b` (the location derivative is the negative of the first).
pub fn bin_bits_with_grads(x: f64, mu: f64, log_b: f64) -> (f64, f64, f64) {
    let b = log_b.exp();
    let d = x - mu;
    let sign = if d > 0.0 { -1.0 } else { 1.0 };
    let dl = -d.abs();
    let u1 = (dl + 0.5) / b;
    let u2 = (dl - 0.5) / b;
    let p = sigmoid(u1) - sigmoid(u2);
    if p <= PROB_FLOOR {
        return (-PROB_FLOOR.log2(), 0.0, 0.0);
    }
    let bits = -p.log2();
    let s1 = sigmoid_slope(u1);
    let s2 = sigmoid_slope(u2);
    // dp/d(dl) and dp/d(log b) on the reflected coordinate.
    let dp_ddl = (s1 - s2) / b;
    let dp_dlogb = -(s1 * u1 - s2 * u2);
    let k = -1.0 / (p * LN_2);
    (bits, k * dp_ddl * sign, k * dp_dlogb)
}
