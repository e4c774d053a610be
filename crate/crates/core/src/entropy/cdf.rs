use crate::codec::FactorizedPrior;
use crate::error::{invalid, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

/// Fixed-point cumulative frequencies for one latent channel.
///
/// Symbols `smin..=smax` occupy slots `0..n`; when present, the escape
/// symbol occupies slot `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelCdf {
    pub smin: i32,
    pub smax: i32,
    pub escape: bool,
    /// `cum[0] == 0`, `cum[slots] == TOTAL`, strictly increasing.
    cum: Vec<u32>,
}

impl ChannelCdf {
    /// Quantizes `probs` (one per symbol, followed by the escape mass if
    /// `escape`) to frequencies summing to exactly 2^16, each at least 1.
    pub fn from_probabilities(smin: i32, probs: &[f64], escape: bool) -> Result<Self> {
        let slots = probs.len();
        let n_sym = if escape { slots.checked_sub(1) } else { Some(slots) }
            .filter(|&n| n >= 1)
            .ok_or_else(|| invalid("a CDF needs at least one symbol"))?;
        if slots > TOTAL as usize {
            return Err(invalid(format!("{slots} slots exceed the 16-bit table precision")));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        let mut freq: Vec<i64> = probs
            .iter()
            .map(|&p| {
                let share = if sum > 0.0 { p / sum } else { 1.0 / slots as f64 };
                ((share * TOTAL as f64).round() as i64).max(1)
            })
            .collect();
        // Move the rounding residue onto the largest bins.
        let mut diff = TOTAL as i64 - freq.iter().sum::<i64>();
        while diff != 0 {
            let mut order: Vec<usize> = (0..slots).collect();
            order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            let mut moved = false;
            for &i in &order {
                if diff == 0 {
                    break;
                }
                if diff > 0 {
                    freq[i] += 1;
                    diff -= 1;
                    moved = true;
                } else if freq[i] > 1 {
                    let take = (freq[i] - 1).min(-diff).min((freq[i] / 8).max(1));
                    freq[i] -= take;
                    diff += take;
                    moved = true;
                }
            }
            debug_assert!(moved, "slots <= TOTAL guarantees progress");
        }
        let mut cum = Vec::with_capacity(slots + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freq {
            acc += f as u32;
            cum.push(acc);
        }
        Ok(ChannelCdf {
            smin,
            smax: smin + n_sym as i32 - 1,
            escape,
            cum,
        })
    }

    pub fn slots(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, slot: usize) -> u32 {
        self.cum[slot + 1] - self.cum[slot]
    }

    pub fn start(&self, slot: usize) -> u32 {
        self.cum[slot]
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    /// Slot of a symbol, or `None` when it needs the escape path.
    pub fn slot_of(&self, symbol: i32) -> Option<usize> {
        (self.smin..=self.smax)
            .contains(&symbol)
            .then(|| (symbol - self.smin) as usize)
    }

    pub fn escape_slot(&self) -> Option<usize> {
        self.escape.then(|| self.slots() - 1)
    }

    /// Slot whose interval contains `value` (< TOTAL).
    pub fn lookup(&self, value: u32) -> usize {
        self.cum.partition_point(|&c| c <= value) - 1
    }

    /// Ideal code length of one symbol in bits under this table.
    pub fn cost_bits(&self, symbol: i32) -> f64 {
        let slot = match self.slot_of(symbol) {
            Some(s) => s,
            None => match self.escape_slot() {
                Some(e) => return -(self.freq(e) as f64 / TOTAL as f64).log2() + super::ESCAPE_RAW_BITS as f64,
                None => return f64::INFINITY,
            },
        };
        -(self.freq(slot) as f64 / TOTAL as f64).log2()
    }

    pub(crate) fn from_cumulative(smin: i32, smax: i32, escape: bool, cum: Vec<u32>) -> Result<Self> {
        let n_sym = (smax as i64 - smin as i64 + 1).max(0) as usize;
        if n_sym == 0 || cum.len() != n_sym + usize::from(escape) + 1 {
            return Err(invalid("cumulative table length does not match symbol range"));
        }
        if cum[0] != 0 || *cum.last().unwrap() != TOTAL || cum.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("cumulative table must rise strictly from 0 to 65536"));
        }
        Ok(ChannelCdf { smin, smax, escape, cum })
    }
}

/// One table per latent channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub channels: Vec<ChannelCdf>,
}

impl CdfTable {
    /// Freezes the logistic prior over per-channel ranges `[lo, hi]`, with an
    /// escape slot carrying the tail mass outside the range.
    pub fn freeze(prior: &FactorizedPrior, ranges: &[(i32, i32)]) -> Result<Self> {
        if ranges.len() != prior.channels() {
            return Err(invalid(format!(
                "{} clip ranges for {} prior channels",
                ranges.len(),
                prior.channels()
            )));
        }
        let channels = ranges
            .iter()
            .enumerate()
            .map(|(c, &(lo, hi))| {
                if lo > hi {
                    return Err(invalid(format!("channel {c}: empty range [{lo}, {hi}]")));
                }
                let mut probs: Vec<f64> = (lo..=hi).map(|s| prior.probability(c, s as f64)).collect();
                let inside: f64 = probs.iter().sum();
                probs.push((1.0 - inside).max(0.0));
                ChannelCdf::from_probabilities(lo, &probs, true)
            })
            .collect::<Result<_>>()?;
        Ok(CdfTable { channels })
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }
}
