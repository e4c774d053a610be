use crate::error::{shape_err, Result};
use crate::nn::logistic::{bin_bits_with_grads, bin_probability};
use crate::nn::Parameter;
use crate::tensor::Tensor;

/// Independent logistic density per latent channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub mu: Parameter,
    pub log_b: Parameter,
}

impl FactorizedPrior {
    pub fn new(channels: usize) -> Self {
        FactorizedPrior {
            mu: Parameter::new(Tensor::zeros(&[channels])),
            log_b: Parameter::new(Tensor::zeros(&[channels])),
        }
    }

    pub fn from_values(mu: Vec<f64>, log_b: Vec<f64>) -> Result<Self> {
        if mu.len() != log_b.len() {
            return Err(shape_err("prior", "location and scale lengths differ"));
        }
        let n = mu.len();
        Ok(FactorizedPrior {
            mu: Parameter::new(Tensor::new(vec![n], mu)?),
            log_b: Parameter::new(Tensor::new(vec![n], log_b)?),
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.numel()
    }

    pub fn location(&self, c: usize) -> f64 {
        self.mu.value.data()[c]
    }

    pub fn scale(&self, c: usize) -> f64 {
        self.log_b.value.data()[c].exp()
    }

    /// Unfloored mass of the unit bin at `x` in channel `c`.
    pub fn probability(&self, c: usize, x: f64) -> f64 {
        bin_probability(x, self.location(c), self.scale(c))
    }

    /// Floored code length of symbol `x` in channel `c`.
    pub fn symbol_bits(&self, c: usize, x: f64) -> f64 {
        bin_bits_with_grads(x, self.location(c), self.log_b.value.data()[c]).0
    }

    /// Total estimated bits of a `[B, C, H, W]` latent.
    pub fn total_bits(&self, latent: &Tensor) -> Result<f64> {
        let (_, c, h, w) = latent.dims4()?;
        if c != self.channels() {
            return Err(shape_err("prior", format!("latent has {c} channels, prior {}", self.channels())));
        }
        let plane = h * w;
        Ok(latent
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| self.symbol_bits((i / plane) % c, x))
            .sum())
    }

    /// Keeps only the listed channels.
    pub fn select(&self, keep: &[usize]) -> Self {
        let pick = |p: &Parameter| keep.iter().map(|&i| p.value.data()[i]).collect::<Vec<_>>();
        Self::from_values(pick(&self.mu), pick(&self.log_b)).expect("same length")
    }
}
