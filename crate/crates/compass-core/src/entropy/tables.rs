//! Integer CDF tables for range coding.
//!
//! A [`CdfTable`] maps each symbol to an integer frequency span out of a
//! fixed total of 2^16. Construction from floating-point bin probabilities
//! follows one normative rule (encoder and decoder must share it verbatim):
//!
//! 1. each probability is scaled by 2^16 and rounded to the nearest integer
//!    (ties away from zero),
//! 2. zero frequencies are raised to 1 so every symbol stays codable,
//! 3. the total is fixed up to exactly 2^16 by adjusting the currently
//!    largest frequency (smallest index on ties), repeatedly if necessary,
//!    never pushing any frequency below 1.
//!
//! Latent-coding tables reserve the last symbol index as an escape: values
//! outside the central range `[-S, S]` are coded as the escape symbol
//! followed by the raw value (zigzag-mapped, four uniform bytes).

use crate::codec::{z_bin_prob_plain, z_cdf_plain};
use crate::params::Params;
use crate::tensor::ops::normal_cdf;

use super::TOTAL_FREQ;

/// Cumulative frequency table over `n` symbols: `cdf.len() == n + 1`,
/// `cdf[0] == 0`, `cdf[n] == 2^16`, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    /// Symbols whose probability rounded to zero and were forced up to the
    /// minimum mass of 1. Encoders treat these as escape-worthy: coding them
    /// through the escape path costs roughly what the rate model charges for
    /// a floored probability, keeping real and estimated bit counts aligned.
    raised: Vec<bool>,
}

impl CdfTable {
    /// Builds a table from bin probabilities via the normative rounding rule.
    ///
    /// `probs` must be non-empty, hold at most 2^16 entries, and contain no
    /// negative or non-finite values; it does not need to sum to exactly 1.
    pub fn from_probs(probs: &[f64]) -> CdfTable {
        assert!(!probs.is_empty(), "empty probability vector");
        assert!(
            probs.len() <= TOTAL_FREQ as usize,
            "more symbols than frequency units"
        );
        let mut raised = Vec::with_capacity(probs.len());
        let mut freq: Vec<u32> = probs
            .iter()
            .map(|&p| {
                assert!(p.is_finite() && p >= 0.0, "invalid probability {p}");
                let f = (p * f64::from(TOTAL_FREQ)).round() as u32;
                raised.push(f == 0);
                f.max(1)
            })
            .collect();
        let mut total: i64 = freq.iter().map(|&f| i64::from(f)).sum();
        while total != i64::from(TOTAL_FREQ) {
            let j = argmax(&freq);
            let deficit = i64::from(TOTAL_FREQ) - total;
            if deficit > 0 {
                freq[j] += deficit as u32;
                total += deficit;
            } else {
                let take = (-deficit).min(i64::from(freq[j]) - 1);
                assert!(take > 0, "cannot renormalize: all frequencies at minimum");
                freq[j] -= take as u32;
                total -= take;
            }
        }
        let mut cdf = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        CdfTable { cdf, raised }
    }

    pub fn n_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Frequency span `(cum, freq)` of symbol `s`.
    pub fn span(&self, s: usize) -> (u32, u32) {
        (self.cdf[s], self.cdf[s + 1] - self.cdf[s])
    }

    /// Symbol whose span contains frequency offset `f` (`f < 2^16`).
    pub fn find(&self, f: u32) -> usize {
        // First index with cdf[i] > f, minus one; spans are non-empty so this
        // is exact.
        self.cdf.partition_point(|&c| c <= f) - 1
    }

    pub fn mass(&self, s: usize) -> u32 {
        self.cdf[s + 1] - self.cdf[s]
    }

    /// True when symbol `s` only has mass because of the minimum-mass rule.
    pub fn is_raised(&self, s: usize) -> bool {
        self.raised[s]
    }
}

fn argmax(freq: &[u32]) -> usize {
    let mut best = 0usize;
    for (i, &f) in freq.iter().enumerate() {
        if f > freq[best] {
            best = i;
        }
    }
    best
}

/// Number of table symbols for central range `[-S, S]` plus the escape.
pub fn table_symbols(symbol_range: u32) -> usize {
    2 * symbol_range as usize + 2
}

/// Index of the escape symbol in a latent-coding table.
pub fn escape_index(symbol_range: u32) -> usize {
    2 * symbol_range as usize + 1
}

/// Maps an integer latent symbol to its table index, or `None` if it must be
/// escape-coded.
pub fn symbol_index(s: i64, symbol_range: u32) -> Option<usize> {
    let range = i64::from(symbol_range);
    if (-range..=range).contains(&s) {
        Some((s + range) as usize)
    } else {
        None
    }
}

/// Inverse of [`symbol_index`] for non-escape table indices.
pub fn index_symbol(idx: usize, symbol_range: u32) -> i64 {
    idx as i64 - i64::from(symbol_range)
}

/// Bin probabilities for a Gaussian-conditioned latent element.
///
/// The element's conditional mean is split as `round(mu) + delta`; symbols
/// are offsets from `round(mu)`, so bin `s` integrates the Gaussian over
/// `[s - delta - 0.5, s - delta + 0.5]`. The final entry is the escape
/// (two-sided tail) mass.
pub fn gaussian_probs(delta: f64, sigma: f64, symbol_range: u32) -> Vec<f64> {
    let range = i64::from(symbol_range);
    let mut probs = Vec::with_capacity(table_symbols(symbol_range));
    let mut lo = normal_cdf((-(range as f64) - delta - 0.5) / sigma);
    let left_tail = lo;
    for s in -range..=range {
        let hi = normal_cdf((s as f64 - delta + 0.5) / sigma);
        probs.push((hi - lo).max(0.0));
        lo = hi;
    }
    let escape = (left_tail + (1.0 - lo)).max(0.0);
    probs.push(escape);
    probs
}

/// Table for one Gaussian-conditioned element.
pub fn gaussian_table(delta: f64, sigma: f64, symbol_range: u32) -> CdfTable {
    CdfTable::from_probs(&gaussian_probs(delta, sigma, symbol_range))
}

/// Bin probabilities for one channel of the hyper latent under its learned
/// channelwise prior. Symbols are the integer values themselves.
pub fn z_channel_probs(
    params: &Params,
    prefix: &str,
    channel: usize,
    symbol_range: u32,
) -> Vec<f64> {
    let range = i64::from(symbol_range);
    let mut probs = Vec::with_capacity(table_symbols(symbol_range));
    for s in -range..=range {
        probs.push(z_bin_prob_plain(params, prefix, channel, s as f64).max(0.0));
    }
    let lo = z_cdf_plain(params, prefix, channel, -(range as f64) - 0.5);
    let hi = z_cdf_plain(params, prefix, channel, range as f64 + 0.5);
    probs.push((lo + (1.0 - hi)).max(0.0));
    probs
}

/// Per-channel tables for the hyper latent.
pub fn z_channel_tables(params: &Params, prefix: &str, channels: usize, symbol_range: u32) -> Vec<CdfTable> {
    (0..channels)
        .map(|c| CdfTable::from_probs(&z_channel_probs(params, prefix, c, symbol_range)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CompassModel, ModelConfig, SIGMA_MIN};

    #[test]
    fn totals_are_exact_and_masses_positive() {
        for probs in [
            vec![0.5, 0.5],
            vec![1.0, 0.0, 0.0],
            vec![1e-12; 100],
            vec![0.3, 0.3, 0.4000001],
        ] {
            let t = CdfTable::from_probs(&probs);
            assert_eq!(t.span(0).0, 0);
            let total: u32 = (0..t.n_symbols()).map(|s| t.mass(s)).sum();
            assert_eq!(total, TOTAL_FREQ);
            for s in 0..t.n_symbols() {
                assert!(t.mass(s) >= 1);
            }
        }
    }

    #[test]
    fn find_inverts_span() {
        let t = CdfTable::from_probs(&[0.1, 0.0, 0.7, 0.2]);
        for s in 0..t.n_symbols() {
            let (cum, freq) = t.span(s);
            assert_eq!(t.find(cum), s);
            assert_eq!(t.find(cum + freq - 1), s);
        }
        assert_eq!(t.find(TOTAL_FREQ - 1), t.n_symbols() - 1);
    }

    #[test]
    fn tiny_sigma_concentrates_on_center() {
        let t = gaussian_table(0.0, SIGMA_MIN, 64);
        let center = symbol_index(0, 64).unwrap();
        // All mass except the forced minimum of 1 per other symbol.
        let others = (table_symbols(64) - 1) as u32;
        assert_eq!(t.mass(center), TOTAL_FREQ - others);
    }

    #[test]
    fn centered_table_is_symmetric_within_one_unit() {
        for sigma in [0.3, 1.0, 4.0, 20.0] {
            let t = gaussian_table(0.0, sigma, 64);
            for s in 1..=64i64 {
                let a = t.mass(symbol_index(s, 64).unwrap());
                let b = t.mass(symbol_index(-s, 64).unwrap());
                assert!(
                    (i64::from(a) - i64::from(b)).abs() <= 1,
                    "sigma {sigma} s {s}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn shifted_mean_moves_the_mode() {
        let t = gaussian_table(0.4, 0.5, 8);
        let m0 = t.mass(symbol_index(0, 8).unwrap());
        let m1 = t.mass(symbol_index(1, 8).unwrap());
        let mm1 = t.mass(symbol_index(-1, 8).unwrap());
        assert!(m0 > m1 && m1 > mm1);
    }

    #[test]
    fn escape_mass_grows_with_sigma() {
        let narrow = gaussian_table(0.0, 1.0, 8);
        let wide = gaussian_table(0.0, 50.0, 8);
        let e = escape_index(8);
        assert!(wide.mass(e) > narrow.mass(e));
        assert!(narrow.mass(e) >= 1);
    }

    #[test]
    fn symbol_index_roundtrip_and_escape() {
        assert_eq!(symbol_index(-64, 64), Some(0));
        assert_eq!(symbol_index(0, 64), Some(64));
        assert_eq!(symbol_index(64, 64), Some(128));
        assert_eq!(symbol_index(65, 64), None);
        assert_eq!(symbol_index(-65, 64), None);
        for idx in [0usize, 3, 64, 128] {
            assert_eq!(symbol_index(index_symbol(idx, 64), 64), Some(idx));
        }
        assert_eq!(escape_index(64), 129);
        assert_eq!(table_symbols(64), 130);
    }

    #[test]
    fn fresh_hyper_prior_tables_are_usable() {
        let model = CompassModel::init(ModelConfig::tiny(), 5).unwrap();
        let tables = z_channel_tables(&model.params, "bl", model.config.hyper_channels, 64);
        assert_eq!(tables.len(), model.config.hyper_channels);
        for t in &tables {
            let total: u32 = (0..t.n_symbols()).map(|s| t.mass(s)).sum();
            assert_eq!(total, TOTAL_FREQ);
            // Fresh prior is roughly a logistic of scale 10: the center bin
            // holds a few percent of the mass, far bins much less.
            assert!(t.mass(symbol_index(0, 64).unwrap()) > t.mass(symbol_index(60, 64).unwrap()));
        }
    }
}
