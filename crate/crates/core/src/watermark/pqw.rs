//! Post-quantization DCT spread-spectrum watermark (comparison baseline).
//!
//! The dequantized layer is trimmed to `N²` weights, shuffled with a
//! key-seeded permutation and viewed as an `N × N` matrix. A key-seeded `±1`
//! sequence is added to the middle third of its zigzag-ordered 2-D DCT
//! coefficients, the matrix is transformed back and the layer re-quantized.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quantizer::{QuantizedModel, WEIGHT_QMAX};

/// Normalized correlation above which the mark counts as present.
pub const PQW_THRESHOLD: f64 = 0.25;
const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqwConfig {
    pub layer: usize,
    pub key: u64,
    /// Spread amplitude as a multiple of the band's RMS coefficient.
    pub strength: f64,
}

/// Orthonormal DCT-II basis, row `k` is frequency `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = a * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    d
}

/// `a · b` for row-major `n × n` matrices, with optional transposes.
fn matmul(a: &[f64], ta: bool, b: &[f64], tb: bool, n: usize) -> Vec<f64> {
    let at = |i: usize, k: usize| if ta { a[k * n + i] } else { a[i * n + k] };
    let bt = |k: usize, j: usize| if tb { b[j * n + k] } else { b[k * n + j] };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let x = at(i, k);
            for j in 0..n {
                out[i * n + j] += x * bt(k, j);
            }
        }
    }
    out
}

/// Row-major indices in JPEG zigzag order.
pub fn zigzag(n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * n);
    for s in 0..2 * n - 1 {
        let lo = s.saturating_sub(n - 1);
        let hi = s.min(n - 1);
        if s % 2 == 0 {
            for r in (lo..=hi).rev() {
                out.push(r * n + s - r);
            }
        } else {
            for r in lo..=hi {
                out.push(r * n + s - r);
            }
        }
    }
    out
}

struct Transform {
    n: usize,
    perm: Vec<usize>,
    band: Vec<usize>,
    signs: Vec<f64>,
    dct: Vec<f64>,
}

impl Transform {
    fn new(len: usize, key: u64) -> Result<Self> {
        let n = (len as f64).sqrt().floor() as usize;
        let n = if (n + 1) * (n + 1) <= len { n + 1 } else { n };
        if n < MIN_SIDE {
            return Err(invalid(format!("layer has {len} weights; at least {} are needed", MIN_SIDE * MIN_SIDE)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut perm: Vec<usize> = (0..n * n).collect();
        perm.shuffle(&mut rng);
        let zz = zigzag(n);
        let l = n * n;
        let band = zz[l / 3..2 * l / 3].to_vec();
        let signs = band.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        Ok(Transform {
            n,
            perm,
            band,
            signs,
            dct: dct_matrix(n),
        })
    }

    fn forward(&self, w: &[f64]) -> Vec<f64> {
        let m: Vec<f64> = self.perm.iter().map(|&p| w[p]).collect();
        let t = matmul(&self.dct, false, &m, false, self.n);
        matmul(&t, false, &self.dct, true, self.n)
    }

    fn inverse(&self, c: &[f64], w: &mut [f64]) {
        let t = matmul(&self.dct, true, c, false, self.n);
        let m = matmul(&t, false, &self.dct, false, self.n);
        for (i, &p) in self.perm.iter().enumerate() {
            w[p] = m[i];
        }
    }

    fn correlation(&self, c: &[f64]) -> f64 {
        let (mut dot, mut vv) = (0.0, 0.0);
        for (&i, s) in self.band.iter().zip(&self.signs) {
            dot += c[i] * s;
            vv += c[i] * c[i];
        }
        if vv == 0.0 {
            return 0.0;
        }
        dot / (vv.sqrt() * (self.band.len() as f64).sqrt())
    }
}

fn layer_weights(qm: &QuantizedModel, layer: usize) -> Result<Vec<f64>> {
    qm.layers
        .get(layer)
        .map(|l| l.dequantized_weight().into_data())
        .ok_or_else(|| invalid(format!("model has no layer {layer}")))
}

pub fn pqw_embed(qm: &QuantizedModel, cfg: &PqwConfig) -> Result<QuantizedModel> {
    if !(cfg.strength.is_finite() && cfg.strength >= 0.0) {
        return Err(invalid("PQW strength must be finite and non-negative"));
    }
    let mut w = layer_weights(qm, cfg.layer)?;
    let tr = Transform::new(w.len(), cfg.key)?;
    let mut out = qm.clone();
    if cfg.strength == 0.0 {
        return Ok(out);
    }
    let mut c = tr.forward(&w);
    let rms = (tr.band.iter().map(|&i| c[i] * c[i]).sum::<f64>() / tr.band.len() as f64).sqrt();
    let alpha = cfg.strength * rms;
    for (&i, s) in tr.band.iter().zip(&tr.signs) {
        c[i] += alpha * s;
    }
    tr.inverse(&c, &mut w);
    let l = &mut out.layers[cfg.layer];
    let q = WEIGHT_QMAX as f64;
    for (dst, v) in l.weight.iter_mut().zip(&w) {
        *dst = crate::nn::quantize_value(*v, l.s_w, -q, q) as i8;
    }
    Ok(out)
}

/// Normalized correlation of the mid band against the key's sequence.
pub fn pqw_detect(qm: &QuantizedModel, layer: usize, key: u64) -> Result<f64> {
    let w = layer_weights(qm, layer)?;
    let tr = Transform::new(w.len(), key)?;
    Ok(tr.correlation(&tr.forward(&w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{LicConfig, LicModel};
    use crate::image::synthetic_corpus;
    use crate::quantizer::{calibrate, QuantContext};

    fn qm() -> QuantizedModel {
        let model = LicModel::new(
            LicConfig {
                stages: 2,
                channels: 8,
                ..LicConfig::default()
            },
            1,
        )
        .unwrap();
        let data = synthetic_corpus(2, 16, 1);
        let ctx = QuantContext::new(&model, &calibrate(&model, &data).unwrap()).unwrap();
        QuantizedModel::export(&model, &ctx, &data).unwrap()
    }

    #[test]
    fn zigzag_is_a_permutation_in_order() {
        assert_eq!(zigzag(3), vec![0, 1, 3, 6, 4, 2, 5, 7, 8]);
        let mut z = zigzag(7);
        z.sort();
        assert_eq!(z, (0..49).collect::<Vec<_>>());
    }

    #[test]
    fn dct_is_orthonormal() {
        let n = 6;
        let d = dct_matrix(n);
        let i = matmul(&d, false, &d, true, n);
        for r in 0..n {
            for c in 0..n {
                assert!((i[r * n + c] - if r == c { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_detect_contract() {
        let base = qm();
        let layer = 2;
        let band = Transform::new(base.layers[layer].weight.len(), 5).unwrap().band.len() as f64;
        let same = pqw_embed(&base, &PqwConfig { layer, key: 5, strength: 0.0 }).unwrap();
        assert_eq!(same, base);
        assert!(pqw_detect(&base, layer, 5).unwrap().abs() < 3.0 / band.sqrt());
        let marked = pqw_embed(&base, &PqwConfig { layer, key: 5, strength: 0.75 }).unwrap();
        assert!(pqw_detect(&marked, layer, 5).unwrap() > 0.5);
        assert!(pqw_detect(&marked, layer, 6).unwrap().abs() < PQW_THRESHOLD);
        assert!(pqw_embed(&base, &PqwConfig { layer: 9, key: 5, strength: 1.0 }).is_err());
    }

    #[test]
    fn small_layer_is_rejected() {
        assert!(Transform::new(50, 1).is_err());
        assert_eq!(Transform::new(64, 1).unwrap().n, 8);
    }
}
