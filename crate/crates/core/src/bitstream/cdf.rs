//! 16-bit quantized cumulative frequency tables.

use super::CoderError;
use crate::autograd::normal_cdf;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

/// Largest half-width of a Gaussian table; symbols beyond it are escaped.
pub const MAX_HALF_RANGE: i32 = 4096;
/// Gaussian tables cover `[-16 sigma, 16 sigma]` before clipping.
pub const TAIL_SIGMAS: f64 = 16.0;

/// Cumulative frequencies for one coding context. Symbols
/// `offset..offset + n` map to entries `0..n`; when `escape` is set an extra
/// final entry stands for every symbol outside that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i32,
    cdf: Vec<u32>,
    escape: bool,
}

impl CdfTable {
    /// Quantizes probabilities of the in-range symbols. Every entry gets a
    /// frequency of at least 1; with `escape` the leftover mass
    /// `1 - sum(pmf)` becomes the escape entry.
    pub fn from_pmf(pmf: &[f64], offset: i32, escape: bool) -> Result<Self, CoderError> {
        let mut probs: Vec<f64> = pmf
            .iter()
            .map(|&p| if p.is_finite() { p.max(0.0) } else { 0.0 })
            .collect();
        if escape {
            let mass: f64 = probs.iter().sum();
            probs.push((1.0 - mass).max(0.0));
        }
        let freqs = quantize_probabilities(&probs)?;
        Self::from_frequencies(&freqs, offset, escape)
    }

    /// Builds a table from explicit frequencies, which must be positive and
    /// sum to [`TOTAL_FREQ`].
    pub fn from_frequencies(freqs: &[u32], offset: i32, escape: bool) -> Result<Self, CoderError> {
        if freqs.is_empty() || (escape && freqs.len() < 2) {
            return Err(CoderError::EmptyRange);
        }
        if freqs.len() > TOTAL_FREQ as usize {
            return Err(CoderError::TableTooLarge {
                entries: freqs.len(),
            });
        }
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for &f in freqs {
            if f == 0 {
                return Err(CoderError::InvalidTable("zero frequency".into()));
            }
            acc += f as u64;
            if acc > TOTAL_FREQ as u64 {
                return Err(CoderError::InvalidTable("frequencies exceed total".into()));
            }
            cdf.push(acc as u32);
        }
        if acc != TOTAL_FREQ as u64 {
            return Err(CoderError::InvalidTable(format!(
                "frequencies sum to {acc}"
            )));
        }
        Ok(Self {
            offset,
            cdf,
            escape,
        })
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    /// Number of table entries including the escape entry.
    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of directly coded symbols.
    pub fn in_range(&self) -> usize {
        self.len() - self.escape as usize
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cdf.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn frequency(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Entry of a directly coded symbol, or `None` if it must be escaped.
    pub fn index_of(&self, symbol: i32) -> Option<usize> {
        let i = symbol as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.in_range()).then_some(i as usize)
    }

    pub fn escape_index(&self) -> Option<usize> {
        self.escape.then(|| self.len() - 1)
    }

    /// Probability the coder assigns to a symbol (escape mass for
    /// out-of-range symbols, excluding the raw payload).
    pub fn probability(&self, symbol: i32) -> f64 {
        match self.index_of(symbol).or(self.escape_index()) {
            Some(i) => self.frequency(i) as f64 / TOTAL_FREQ as f64,
            None => 0.0,
        }
    }
}

/// Rounds probabilities to integer frequencies summing to [`TOTAL_FREQ`].
///
/// Each entry starts at `max(1, floor(p * 2^16 + 0.5))`. A shortfall goes to
/// the largest entry (first on ties). An excess is taken from every entry in
/// proportion to its headroom above 1, rounding down; the few units left
/// come one each from the largest entries, larger first, then lower index.
pub fn quantize_probabilities(probs: &[f64]) -> Result<Vec<u32>, CoderError> {
    if probs.is_empty() {
        return Err(CoderError::EmptyRange);
    }
    if probs.len() > TOTAL_FREQ as usize {
        return Err(CoderError::TableTooLarge {
            entries: probs.len(),
        });
    }
    let mut freqs: Vec<i64> = probs
        .iter()
        .map(|&p| ((p * TOTAL_FREQ as f64 + 0.5).floor() as i64).clamp(1, TOTAL_FREQ as i64))
        .collect();
    let sum: i64 = freqs.iter().sum();
    let total = TOTAL_FREQ as i64;
    if sum < total {
        let i = freqs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > freqs[best] { i } else { best });
        freqs[i] += total - sum;
    } else if sum > total {
        let excess = sum - total;
        let headroom: i64 = freqs.iter().map(|f| f - 1).sum();
        let mut taken = 0;
        for f in freqs.iter_mut() {
            let t = ((excess as i128 * (*f - 1) as i128) / headroom as i128) as i64;
            *f -= t;
            taken += t;
        }
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
        let mut left = excess - taken;
        while left > 0 {
            for &i in &order {
                if left == 0 {
                    break;
                }
                if freqs[i] > 1 {
                    freqs[i] -= 1;
                    left -= 1;
                }
            }
        }
    }
    Ok(freqs.into_iter().map(|f| f as u32).collect())
}

/// Probability of the integer offset `s` from the mean under a unit-bin
/// discretized Gaussian, evaluated on the lower tail for precision.
pub fn gaussian_bin_probability(s: i32, sigma: f64) -> f64 {
    let v = (s as f64).abs();
    normal_cdf((0.5 - v) / sigma) - normal_cdf((-0.5 - v) / sigma)
}

/// Half-width of the table built for `sigma`.
pub fn gaussian_half_range(sigma: f64) -> i32 {
    let r = (TAIL_SIGMAS * sigma).ceil();
    if r.is_finite() {
        (r as i64).clamp(1, MAX_HALF_RANGE as i64) as i32
    } else {
        MAX_HALF_RANGE
    }
}

/// Table for mean-centered symbols `round(y - mu)` with scale `sigma`.
pub fn gaussian_table(sigma: f64) -> Result<CdfTable, CoderError> {
    if !(sigma > 0.0) {
        return Err(CoderError::InvalidTable(format!(
            "non-positive scale {sigma}"
        )));
    }
    let r = gaussian_half_range(sigma);
    let pmf: Vec<f64> = (-r..=r)
        .map(|s| gaussian_bin_probability(s, sigma))
        .collect();
    CdfTable::from_pmf(&pmf, -r, true)
}
