//! Secure-aggregation simulator.
//!
//! `Ideal` returns the exact average. `Masked` encodes each message as fixed
//! point in the ring `Z_{2^m}`, adds pairwise masks that cancel in the sum,
//! and decodes only the aggregate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{derive, stream_from};
use crate::sketching::{Scratch, SketchOperator, SketchedVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldConfig {
    modulus_bits: u32,
    scale_bits: u32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            modulus_bits: 64,
            scale_bits: 20,
        }
    }
}

impl FieldConfig {
    pub fn new(modulus_bits: u32, scale_bits: u32) -> Result<Self> {
        if modulus_bits != 32 && modulus_bits != 64 {
            return Err(Error::InvalidField(format!(
                "modulus_bits must be 32 or 64, got {modulus_bits}"
            )));
        }
        if scale_bits == 0 || scale_bits >= modulus_bits - 1 {
            return Err(Error::InvalidField(format!(
                "scale_bits must be in 1..{}, got {scale_bits}",
                modulus_bits - 1
            )));
        }
        Ok(Self {
            modulus_bits,
            scale_bits,
        })
    }

    pub fn modulus_bits(&self) -> u32 {
        self.modulus_bits
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    fn mask(&self) -> u64 {
        if self.modulus_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.modulus_bits) - 1
        }
    }

    fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }

    #[inline]
    fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.mask()
    }

    #[inline]
    fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & self.mask()
    }

    /// Largest magnitude that survives summing `n` encoded values.
    pub fn max_abs(&self, n: usize) -> f64 {
        ((self.modulus_bits - 1) as f64).exp2() / (self.scale() * n as f64)
    }

    fn encode(&self, x: f64, n: usize) -> Result<u64> {
        if !x.is_finite() || x.abs() >= self.max_abs(n) {
            return Err(Error::RangeOverflow {
                value: x,
                modulus_bits: self.modulus_bits,
                scale_bits: self.scale_bits,
                clients: n,
            });
        }
        Ok(((x * self.scale()).round() as i64 as u64) & self.mask())
    }

    fn decode(&self, u: u64) -> f64 {
        let signed = if self.modulus_bits == 64 {
            u as i64 as f64
        } else if u >= 1u64 << 31 {
            (u as i64 - (1i64 << 32)) as f64
        } else {
            u as f64
        };
        signed / self.scale()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecAggMode {
    #[default]
    Ideal,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SecAggConfig {
    pub mode: SecAggMode,
    pub field: FieldConfig,
}

impl SecAggConfig {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn masked(field: FieldConfig) -> Self {
        Self {
            mode: SecAggMode::Masked,
            field,
        }
    }
}

/// Pairwise masks for `n` clients: for each pair `i < j` a shared random
/// vector is added by `i` and subtracted by `j`, so the masks sum to zero.
pub fn pairwise_masks(
    n: usize,
    len: usize,
    seed: u64,
    round: u64,
    field: &FieldConfig,
) -> Result<Vec<Vec<u64>>> {
    if n < 2 {
        return Err(Error::TooFewClients(n));
    }
    let mut masks = vec![vec![0u64; len]; n];
    let m = field.mask();
    for i in 0..n {
        for j in i + 1..n {
            let mut rng = stream_from(derive(seed, &[round, i as u64, j as u64]));
            let (lo, hi) = masks.split_at_mut(j);
            for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                let r = rng.random::<u64>() & m;
                *a = field.add(*a, r);
                *b = field.sub(*b, r);
            }
        }
    }
    Ok(masks)
}

/// A client's encoded, masked contribution. The payload is only readable
/// through [`unmask_sum`].
#[derive(Debug, Clone)]
pub struct MaskedMessage {
    client: usize,
    round: u64,
    payload: Vec<u64>,
}

impl MaskedMessage {
    pub fn client(&self) -> usize {
        self.client
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// Encodes and masks one client's values. `n` is the cohort size, used for
/// the wraparound check.
pub fn mask_message(
    client: usize,
    round: u64,
    values: &[f64],
    mask: &[u64],
    field: &FieldConfig,
    n: usize,
) -> Result<MaskedMessage> {
    if values.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: mask.len(),
            got: values.len(),
        });
    }
    let payload = values
        .iter()
        .zip(mask)
        .map(|(&x, &r)| Ok(field.add(field.encode(x, n)?, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskedMessage {
        client,
        round,
        payload,
    })
}

/// Sums masked messages in the ring and decodes the real-valued sum.
pub fn unmask_sum(messages: &[MaskedMessage], field: &FieldConfig) -> Result<Vec<f64>> {
    let first = messages.first().ok_or(Error::TooFewClients(0))?;
    let len = first.payload.len();
    let mut acc = vec![0u64; len];
    for m in messages {
        if m.round != first.round {
            return Err(Error::RoundMismatch {
                client: m.client,
                expected: first.round,
                got: m.round,
            });
        }
        if m.payload.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: m.payload.len(),
            });
        }
        for (a, &p) in acc.iter_mut().zip(&m.payload) {
            *a = field.add(*a, p);
        }
    }
    Ok(acc.into_iter().map(|u| field.decode(u)).collect())
}

/// Average of `messages` through the configured aggregation mode.
pub fn secagg_mean(
    messages: &[&[f64]],
    cfg: &SecAggConfig,
    seed: u64,
    round: u64,
) -> Result<Vec<f64>> {
    let n = messages.len();
    let len = messages.first().map(|m| m.len()).ok_or(Error::TooFewClients(0))?;
    if let Some(bad) = messages.iter().find(|m| m.len() != len) {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: bad.len(),
        });
    }
    let inv_n = 1.0 / n as f64;
    match cfg.mode {
        SecAggMode::Ideal => {
            let mut sum = vec![0.0; len];
            for m in messages {
                for (s, x) in sum.iter_mut().zip(m.iter()) {
                    *s += x;
                }
            }
            sum.iter_mut().for_each(|s| *s *= inv_n);
            Ok(sum)
        }
        SecAggMode::Masked => {
            let masks = pairwise_masks(n, len, seed, round, &cfg.field)?;
            let masked = messages
                .iter()
                .zip(&masks)
                .enumerate()
                .map(|(c, (m, r))| mask_message(c, round, m, r, &cfg.field, n))
                .collect::<Result<Vec<_>>>()?;
            let mut sum = unmask_sum(&masked, &cfg.field)?;
            sum.iter_mut().for_each(|s| *s *= inv_n);
            Ok(sum)
        }
    }
}

/// Average of the clipped client sketches `clip_rows(S z_c, bound)`.
///
/// In ideal mode the messages are accumulated in place; masked mode
/// materializes each client's message and runs the masking protocol.
pub fn aggregate_sketches(
    op: &SketchOperator,
    clients: &[&[f64]],
    bound: f64,
    cfg: &SecAggConfig,
    mask_seed: u64,
    round: u64,
) -> Result<SketchedVector> {
    let n = clients.len();
    if n == 0 {
        return Err(Error::TooFewClients(0));
    }
    match cfg.mode {
        SecAggMode::Ideal => {
            let mut acc = SketchedVector::zeros(op.params());
            let mut scratch = Scratch::default();
            for z in clients {
                op.accumulate_clipped(z, bound, 1.0, &mut acc, &mut scratch)?;
            }
            acc.scale(1.0 / n as f64);
            Ok(acc)
        }
        SecAggMode::Masked => {
            let msgs = clients
                .iter()
                .map(|z| op.client_message(z, bound).map(SketchedVector::into_data))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<&[f64]> = msgs.iter().map(Vec::as_slice).collect();
            SketchedVector::from_data(op.params(), secagg_mean(&views, cfg, mask_seed, round)?)
        }
    }
}

/// Average of plain vectors clipped to `bound`, for uncompressed rounds.
pub fn aggregate_dense(
    clients: &[&[f64]],
    bound: f64,
    cfg: &SecAggConfig,
    mask_seed: u64,
    round: u64,
) -> Result<Vec<f64>> {
    let clipped = clients
        .iter()
        .map(|z| crate::sketching::clip(z, bound))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<&[f64]> = clipped.iter().map(Vec::as_slice).collect();
    secagg_mean(&views, cfg, mask_seed, round)
}
