//! Communication accounting and error metrics.

use crate::error::{Error, Result};
use crate::fme::RoundScalars;

pub const DEFAULT_BITS_PER_SCALAR: u32 = 32;

/// Per-round scalar counts for one run, in dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommLedger {
    dim: usize,
    bits_per_scalar: u32,
    rounds: Vec<RoundScalars>,
}

impl CommLedger {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            bits_per_scalar: DEFAULT_BITS_PER_SCALAR,
            rounds: Vec::new(),
        }
    }

    pub fn with_bits_per_scalar(mut self, bits: u32) -> Self {
        self.bits_per_scalar = bits;
        self
    }

    pub fn push(&mut self, first: u64, second: u64) {
        self.rounds.push(RoundScalars { first, second });
    }

    pub fn extend(&mut self, rounds: &[RoundScalars]) {
        self.rounds.extend_from_slice(rounds);
    }

    pub fn rounds(&self) -> &[RoundScalars] {
        &self.rounds
    }

    pub fn total_scalars(&self) -> u64 {
        self.rounds.iter().map(RoundScalars::total).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.total_scalars() * self.bits_per_scalar as u64
    }

    pub fn compression_rate(&self) -> Result<f64> {
        let first: Vec<u64> = self.rounds.iter().map(|r| r.first).collect();
        let second: Vec<u64> = self.rounds.iter().map(|r| r.second).collect();
        compression_rate(self.dim, &first, &second)
    }
}

/// `d * T / sum_t (first_t + second_t)`.
pub fn compression_rate(dim: usize, first: &[u64], second: &[u64]) -> Result<f64> {
    if first.len() != second.len() {
        return Err(Error::InvalidMetric(format!(
            "first has {} rounds, second has {}",
            first.len(),
            second.len()
        )));
    }
    if first.is_empty() {
        return Err(Error::InvalidMetric("no rounds recorded".into()));
    }
    let sent: u64 = first.iter().chain(second).sum();
    if sent == 0 {
        return Err(Error::InvalidMetric("no scalars sent".into()));
    }
    Ok(dim as f64 * first.len() as f64 / sent as f64)
}

/// Squared magnitudes sorted in decreasing order.
fn sorted_squares(z: &[f64]) -> Vec<f64> {
    let mut sq: Vec<f64> = z.iter().map(|x| x * x).collect();
    sq.sort_unstable_by(|a, b| b.total_cmp(a));
    sq
}

/// Suffix sums of `sq`: `out[k] = sum_{i >= k} sq[i]`, length `len + 1`.
fn suffix_sums(sq: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; sq.len() + 1];
    for i in (0..sq.len()).rev() {
        out[i] = out[i + 1] + sq[i];
    }
    out
}

/// Norm of `z` with its `k` largest-magnitude entries removed, over `g`.
pub fn tail_norm(z: &[f64], k: usize, g: f64) -> Result<f64> {
    if k > z.len() {
        return Err(Error::InvalidTopK { k, d: z.len() });
    }
    if !(g > 0.0) {
        return Err(Error::InvalidMetric(format!("norm bound must be positive, got {g}")));
    }
    Ok(suffix_sums(&sorted_squares(z))[k].sqrt() / g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KTail {
    pub k: usize,
    /// False when no `k` in `0..=d` met the condition and `k = d` was returned.
    pub satisfied: bool,
}

/// Smallest `k` with `tail_norm(z, k, g)^2 <= bound(k)`.
pub fn k_tail(z: &[f64], g: f64, bound: impl Fn(usize) -> f64) -> Result<KTail> {
    if !(g > 0.0) {
        return Err(Error::InvalidMetric(format!("norm bound must be positive, got {g}")));
    }
    let tails = suffix_sums(&sorted_squares(z));
    let g2 = g * g;
    Ok(tails
        .iter()
        .enumerate()
        .find(|(k, t)| **t / g2 <= bound(*k))
        .map(|(k, _)| KTail { k, satisfied: true })
        .unwrap_or(KTail {
            k: z.len(),
            satisfied: false,
        }))
}

/// Squared error `|a - b|^2`.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_of_two_rounds() {
        let r = compression_rate(100, &[20, 30], &[5, 5]).unwrap();
        assert!((r - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn compression_rejects_degenerate_input() {
        assert!(compression_rate(10, &[], &[]).is_err());
        assert!(compression_rate(10, &[0], &[0]).is_err());
        assert!(compression_rate(10, &[1, 2], &[1]).is_err());
    }

    #[test]
    fn tail_of_three_four() {
        let mut z = vec![0.0; 10];
        z[0] = 3.0;
        z[1] = 4.0;
        assert!((tail_norm(&z, 1, 5.0).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(tail_norm(&z, 2, 5.0).unwrap(), 0.0);
        assert!((tail_norm(&z, 0, 5.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn k_tail_flags_unsatisfiable_bounds() {
        let z = [1.0, 1.0];
        assert_eq!(k_tail(&z, 1.0, |_| -1.0).unwrap(), KTail { k: 2, satisfied: false });
        assert_eq!(k_tail(&z, 1.0, |_| 1.0).unwrap(), KTail { k: 1, satisfied: true });
    }

    #[test]
    fn ledger_counts_bits() {
        let mut l = CommLedger::new(100);
        l.push(20, 5);
        l.push(30, 5);
        assert_eq!(l.total_bits(), 60 * 32);
        assert!((l.compression_rate().unwrap() - 10.0 / 3.0).abs() < 1e-12);
    }
}
