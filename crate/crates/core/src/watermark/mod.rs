//! White-box weight watermarking.
//!
//! A client's bit vector `W` is regressed onto the projection `Xᵀ·vec(θ̂)` of
//! one layer's weights, where `X` is a secret Gaussian key. [`qaw`] embeds it
//! while training under fake quantization so it survives integer export,
//! [`naive`] embeds in float and quantizes afterwards, and [`pqw`] is a
//! DCT spread-spectrum baseline applied to an already-quantized layer.

pub mod naive;
pub mod pqw;
pub mod qaw;

pub use naive::{naive_postfloat_watermark_then_quantize, NaiveReport};
pub use pqw::{pqw_detect, pqw_embed, PqwConfig, PQW_THRESHOLD};
pub use qaw::{beta_trace_csv, default_beta, qaw_finetune, BetaRecord, QawConfig, QawResult};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::LicModel;
use crate::error::{format_err, invalid, shape_err, Result};
use crate::nn::{project_values, Graph, Var};
use crate::quantizer::QuantizedModel;
use crate::tensor::Tensor;

pub const MIN_BITS: usize = 32;
/// Decision threshold on each projected coordinate.
pub const BIT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkBits {
    pub bits: Vec<u8>,
    /// SHA-256 of the client public key.
    #[serde(with = "hex_bytes")]
    pub client_id: Vec<u8>,
}

impl WatermarkBits {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_targets(&self) -> Tensor {
        Tensor::from_fn(&[self.bits.len()], |i| self.bits[i] as f64)
    }
}

/// First `m` bits of `SHA-256(tag ‖ len(salt) ‖ salt ‖ pubkey ‖ counter)` blocks.
pub fn derive_watermark(client_pubkey: &[u8], salt: &[u8], m: usize) -> Result<WatermarkBits> {
    if m < MIN_BITS {
        return Err(invalid(format!("watermark needs at least {MIN_BITS} bits, got {m}")));
    }
    let mut bits = Vec::with_capacity(m);
    let mut counter = 0u32;
    while bits.len() < m {
        let mut h = Sha256::new();
        h.update(b"lic-watermark");
        h.update((salt.len() as u32).to_le_bytes());
        h.update(salt);
        h.update(client_pubkey);
        h.update(counter.to_le_bytes());
        for byte in h.finalize() {
            for k in 0..8 {
                bits.push((byte >> k) & 1);
            }
        }
        counter += 1;
    }
    bits.truncate(m);
    Ok(WatermarkBits {
        bits,
        client_id: Sha256::digest(client_pubkey).to_vec(),
    })
}

/// Secret projection key for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMatrix {
    /// Row-major `[N, M]`, i.i.d. standard normal.
    pub x: Arc<Tensor>,
    pub target_layer: usize,
    pub seed: u64,
}

impl KeyMatrix {
    pub fn generate(seed: u64, target_layer: usize, n: usize, m: usize) -> Result<Self> {
        if m > n {
            return Err(invalid(format!("{m} watermark bits exceed the {n} weights of layer {target_layer}")));
        }
        if m == 0 {
            return Err(invalid("key needs at least one column"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(KeyMatrix {
            x: Arc::new(Tensor::new(vec![n, m], data)?),
            target_layer,
            seed,
        })
    }

    /// Key sized for `layer` of a float model.
    pub fn for_model(seed: u64, model: &LicModel, layer: usize, m: usize) -> Result<Self> {
        let l = model
            .layers
            .get(layer)
            .ok_or_else(|| invalid(format!("model has no layer {layer}")))?;
        Self::generate(seed, layer, l.weight.value.numel(), m)
    }

    pub fn for_quantized(seed: u64, qm: &QuantizedModel, layer: usize, m: usize) -> Result<Self> {
        let l = qm
            .layers
            .get(layer)
            .ok_or_else(|| invalid(format!("model has no layer {layer}")))?;
        Self::generate(seed, layer, l.weight.len(), m)
    }

    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn bits(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn project(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.rows() {
            return Err(shape_err(
                "project",
                format!("key has {} rows, layer has {} weights", self.rows(), weights.len()),
            ));
        }
        Ok(project_values(&self.x, weights, self.bits()))
    }
}

/// `E = ||W − Xᵀ·vec(θ̂)||²` as a graph node.
pub fn wm_loss(g: &mut Graph, weights: Var, key: &KeyMatrix, target: &WatermarkBits) -> Result<Var> {
    if target.len() != key.bits() {
        return Err(shape_err("wm_loss", format!("{} bits for a {}-column key", target.len(), key.bits())));
    }
    let proj = g.project(key.x.clone(), weights)?;
    let w = g.constant(target.as_targets());
    let diff = g.sub(w, proj)?;
    g.sum_squares(diff)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub bits: Vec<u8>,
    pub ber: f64,
    pub c_ber: f64,
}

impl ExtractionReport {
    pub fn compare(bits: Vec<u8>, expected: &WatermarkBits) -> Result<Self> {
        if bits.len() != expected.len() {
            return Err(shape_err("extract", format!("{} bits recovered, {} expected", bits.len(), expected.len())));
        }
        let errors = bits.iter().zip(&expected.bits).filter(|(a, b)| a != b).count();
        let ber = errors as f64 / bits.len() as f64;
        Ok(ExtractionReport {
            bits,
            ber,
            c_ber: (1.0 - ber) * 100.0,
        })
    }

    pub fn is_exact(&self) -> bool {
        self.ber == 0.0
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Bits read from real-valued weights by thresholding their projection.
pub fn read_bits(weights: &[f64], key: &KeyMatrix) -> Result<Vec<u8>> {
    Ok(key
        .project(weights)?
        .into_iter()
        .map(|p| u8::from(p > BIT_THRESHOLD))
        .collect())
}

pub fn extract(weights: &[f64], key: &KeyMatrix, expected: &WatermarkBits) -> Result<ExtractionReport> {
    ExtractionReport::compare(read_bits(weights, key)?, expected)
}

/// Extraction from the dequantized target layer of an integer model.
pub fn extract_quantized(qm: &QuantizedModel, key: &KeyMatrix, expected: &WatermarkBits) -> Result<ExtractionReport> {
    let l = qm
        .layers
        .get(key.target_layer)
        .ok_or_else(|| invalid(format!("model has no layer {}", key.target_layer)))?;
    extract(l.dequantized_weight().data(), key, expected)
}

/// C-BER interval holding an unwatermarked model with ~99.7% probability:
/// `50 ± 3·50/√M`.
pub fn chance_band(m: usize) -> (f64, f64) {
    let half = 150.0 / (m as f64).sqrt();
    (50.0 - half, 50.0 + half)
}

/// Provider secret: master seed for key matrices and the watermark salt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderKey {
    pub seed: u64,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
}

impl ProviderKey {
    pub fn generate<R: rand::RngCore>(rng: &mut R) -> Self {
        let mut salt = vec![0u8; 32];
        rng.fill_bytes(&mut salt);
        ProviderKey { seed: rng.next_u64(), salt }
    }

    /// Per-client key-matrix seed.
    pub fn client_key_seed(&self, client_pubkey: &[u8]) -> u64 {
        let mut h = Sha256::new();
        h.update(b"lic-key-matrix");
        h.update(self.seed.to_le_bytes());
        h.update(client_pubkey);
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("provider key serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| format_err("provider key", e.to_string()))
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::nn::gradcheck::max_rel_error;

    #[test]
    fn derivation_is_deterministic_and_spread() {
        let a = derive_watermark(b"client-a", b"salt", 64).unwrap();
        assert_eq!(a, derive_watermark(b"client-a", b"salt", 64).unwrap());
        assert_ne!(a.bits, derive_watermark(b"client-a", b"pepper", 64).unwrap().bits);
        assert!(derive_watermark(b"k", b"s", 0).is_err());
        assert!(derive_watermark(b"k", b"s", 31).is_err());
        assert_eq!(derive_watermark(b"k", b"s", 300).unwrap().len(), 300);

        // Hamming distance of independent 64-bit vectors is Binomial(64, 1/2):
        // mean 32, sd 4. P(d < 16) is about 1e-5 per pair.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total = 0usize;
        let mut min = usize::MAX;
        for _ in 0..1000 {
            let (p, q): ([u8; 32], [u8; 32]) = (rng.gen(), rng.gen());
            let (wp, wq) = (derive_watermark(&p, b"s", 64).unwrap(), derive_watermark(&q, b"s", 64).unwrap());
            let d = wp.bits.iter().zip(&wq.bits).filter(|(a, b)| a != b).count();
            total += d;
            min = min.min(d);
        }
        let mean = total as f64 / 1000.0;
        // sd of the mean is 4/sqrt(1000) = 0.13.
        assert!((mean - 32.0).abs() < 0.6, "{mean}");
        assert!(min >= 16, "{min}");
    }

    #[test]
    fn key_is_seeded_and_standard_normal() {
        let k = KeyMatrix::generate(3, 0, 500, 64).unwrap();
        assert_eq!(k, KeyMatrix::generate(3, 0, 500, 64).unwrap());
        let d = k.x.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
        assert!(KeyMatrix::generate(3, 0, 10, 64).is_err());
    }

    #[test]
    fn loss_examples() {
        // A key whose only non-zero row maps the single weight onto every bit.
        let mut data = vec![0.0; 64 * 64];
        data[..64].fill(1.0);
        let key = KeyMatrix {
            x: Arc::new(Tensor::new(vec![64, 64], data).unwrap()),
            target_layer: 0,
            seed: 0,
        };
        let zeros = WatermarkBits {
            bits: vec![0; 64],
            client_id: vec![],
        };
        let theta = Tensor::from_fn(&[64], |i| if i == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let w = g.param(theta.clone());
        let e = wm_loss(&mut g, w, &key, &zeros).unwrap();
        assert_eq!(g.value(e).item(), 64.0);
        let ones = WatermarkBits {
            bits: vec![1; 64],
            client_id: vec![],
        };
        let mut g = Graph::new();
        let w = g.param(theta);
        let e = wm_loss(&mut g, w, &key, &ones).unwrap();
        assert_eq!(g.value(e).item(), 0.0);
        let short = WatermarkBits {
            bits: vec![1; 32],
            client_id: vec![],
        };
        assert!(wm_loss(&mut g, w, &key, &short).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let key = KeyMatrix::generate(5, 0, 40, 32).unwrap();
        let bits = derive_watermark(b"c", b"s", 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Tensor::uniform(&[40], -0.3, 0.3, &mut rng);
        let err = max_rel_error(&|g, v| wm_loss(g, v[0], &key, &bits), &[theta]);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn extraction_examples() {
        let key = KeyMatrix::generate(9, 0, 64, 64).unwrap();
        let bits = derive_watermark(b"c", b"s", 64).unwrap();
        // Least-squares weights whose projection equals W.
        let n = 64;
        let x = key.x.data();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[j * n + i] = x[i * n + j];
            }
        }
        let theta = solve(a, bits.bits.iter().map(|&b| b as f64).collect());
        let r = extract(&theta, &key, &bits).unwrap();
        assert_eq!((r.ber, r.c_ber), (0.0, 100.0));
        let flipped = WatermarkBits {
            bits: bits.bits.iter().map(|b| 1 - b).collect(),
            client_id: vec![],
        };
        let r = extract(&theta, &key, &flipped).unwrap();
        assert_eq!((r.ber, r.c_ber), (1.0, 0.0));
        assert!(extract(&theta[..10], &key, &bits).is_err());

        let mut fifty = vec![0u8; 50];
        fifty[0] = 1;
        let expected = WatermarkBits {
            bits: vec![0; 50],
            client_id: vec![],
        };
        let r = ExtractionReport::compare(fifty, &expected).unwrap();
        assert!((r.c_ber - 98.0).abs() < 1e-12);
        assert_eq!(r.c_ber, (1.0 - r.ber) * 100.0);
    }

    /// Gaussian elimination with partial pivoting.
    fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
            for k in 0..n {
                a.swap(c * n + k, p * n + k);
            }
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r * n + c] / a[c * n + c];
                for k in c..n {
                    a[r * n + k] -= f * a[c * n + k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r * n + r];
        }
        x
    }

    #[test]
    fn chance_band_and_provider_key() {
        let (lo, hi) = chance_band(64);
        assert!((lo - 31.25).abs() < 1e-12 && (hi - 68.75).abs() < 1e-12);
        let pk = ProviderKey::generate(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ProviderKey::from_json(&pk.to_json()).unwrap(), pk);
        assert_ne!(pk.client_key_seed(b"a"), pk.client_key_seed(b"b"));
        assert!(ProviderKey::from_json("{}").is_err());
    }
}
