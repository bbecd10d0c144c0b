//! Noise calibration, the Gaussian and Laplace mechanisms, and the
//! above-threshold mechanism used to stop the adaptive protocols.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sketching::SketchedVector;

/// An `(epsilon, delta)` budget. `epsilon = inf` turns every mechanism off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidPrivacy(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidPrivacy(format!("delta must be in (0,1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    /// No privacy noise at all.
    pub fn noiseless() -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.5,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_noiseless(&self) -> bool {
        self.epsilon.is_infinite()
    }

    /// `ln(1/delta)`.
    pub fn log_inv_delta(&self) -> f64 {
        (1.0 / self.delta).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolTag {
    AdaptNormFme,
    AdaptTailFme,
    AdaptNormFl,
}

impl ProtocolTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::AdaptNormFme => "adapt-norm-fme",
            Self::AdaptTailFme => "adapt-tail-fme",
            Self::AdaptNormFl => "adapt-norm-fl",
        }
    }
}

impl fmt::Display for ProtocolTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapt-norm-fme" => Ok(Self::AdaptNormFme),
            "adapt-tail-fme" => Ok(Self::AdaptTailFme),
            "adapt-norm-fl" => Ok(Self::AdaptNormFl),
            other => Err(Error::UnknownProtocol(other.to_string())),
        }
    }
}

/// What to calibrate for. The tail protocol's Gaussian scale depends on the
/// number of sketch rows and the dimension; the FL protocols are driven by a
/// noise multiplier instead of an explicit budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Calibration {
    AdaptNormFme,
    AdaptTailFme { rows: usize, dim: usize },
    AdaptNormFl { noise_multiplier: f64 },
}

impl Calibration {
    pub fn tag(&self) -> ProtocolTag {
        match self {
            Self::AdaptNormFme => ProtocolTag::AdaptNormFme,
            Self::AdaptTailFme { .. } => ProtocolTag::AdaptTailFme,
            Self::AdaptNormFl { .. } => ProtocolTag::AdaptNormFl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatNoise {
    Laplace,
    Gaussian,
}

/// Calibrated noise scales.
///
/// `sigma` is the Gaussian scale at the level of the client sum. The server
/// adds `sketch_std = sigma / n` to each entry of the averaged sketch.
/// `sigma_tilde` is the scale of the scalar noise (Laplace or Gaussian) added
/// to the averaged norm or error statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub sigma_tilde: f64,
    pub clip_bound: f64,
    pub sketch_std: f64,
    pub stat_noise: StatNoise,
    pub protocol: ProtocolTag,
}

impl NoiseConfig {
    pub fn draw_stat<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.stat_noise {
            StatNoise::Laplace => laplace_scalar(self.sigma_tilde, rng),
            StatNoise::Gaussian => self.sigma_tilde * standard_normal(rng),
        }
    }
}

/// Noise scales for `n` clients with per-client clip bound `clip_bound`.
///
/// The FME protocols spend half the budget on each noisy statistic. The FL
/// protocols split the noise multiplier's variance 9:1 between the sketch
/// and the norm or error statistic.
pub fn calibrate(
    budget: &PrivacyBudget,
    clip_bound: f64,
    n: usize,
    calibration: Calibration,
) -> Result<NoiseConfig> {
    if !(clip_bound > 0.0 && clip_bound.is_finite()) {
        return Err(Error::InvalidClipBound(clip_bound));
    }
    if n == 0 {
        return Err(Error::InvalidPrivacy("cohort size must be >= 1".into()));
    }
    let nf = n as f64;
    let b = clip_bound;
    let eps = budget.epsilon;
    let base = (256.0 * b * b * budget.log_inv_delta()).sqrt() / eps;
    let cfg = match calibration {
        Calibration::AdaptNormFme => NoiseConfig {
            sigma: base,
            sigma_tilde: 4.0 * b / (nf * eps),
            clip_bound: b,
            sketch_std: base / nf,
            stat_noise: StatNoise::Laplace,
            protocol: ProtocolTag::AdaptNormFme,
        },
        Calibration::AdaptTailFme { rows, dim } => {
            if rows == 0 || dim < 2 {
                return Err(Error::InvalidPrivacy(format!(
                    "tail calibration needs rows >= 1 and dim >= 2 (got {rows}, {dim})"
                )));
            }
            let sigma = base * (rows as f64).sqrt() * (dim as f64).ln();
            NoiseConfig {
                sigma,
                sigma_tilde: 4.0 * b / (nf * eps),
                clip_bound: b,
                sketch_std: sigma / nf,
                stat_noise: StatNoise::Laplace,
                protocol: ProtocolTag::AdaptTailFme,
            }
        }
        Calibration::AdaptNormFl { noise_multiplier } => {
            if !(noise_multiplier >= 0.0 && noise_multiplier.is_finite()) {
                return Err(Error::InvalidPrivacy(format!(
                    "noise multiplier must be finite and >= 0, got {noise_multiplier}"
                )));
            }
            let sigma = noise_multiplier * b / 0.9f64.sqrt();
            NoiseConfig {
                sigma,
                sigma_tilde: noise_multiplier * b / (0.1f64.sqrt() * nf),
                clip_bound: b,
                sketch_std: sigma / nf,
                stat_noise: StatNoise::Gaussian,
                protocol: ProtocolTag::AdaptNormFl,
            }
        }
    };
    Ok(cfg)
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `len` i.i.d. `N(0, scale^2)` draws. A zero scale returns zeros.
pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; len];
    }
    (0..len).map(|_| scale * standard_normal(rng)).collect()
}

/// One `Lap(scale)` draw by inverse CDF. A zero scale returns zero.
pub fn laplace_scalar<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    // u uniform on (-1/2, 1/2), excluding the endpoint that maps to infinity
    let u: f64 = rng.random::<f64>() - 0.5;
    let tail = 1.0 - 2.0 * u.abs();
    if tail <= 0.0 {
        return 0.0;
    }
    -scale * u.signum() * tail.ln()
}

/// Sparse-vector style stopping rule.
///
/// The threshold gets `Lap(scale)` once; every query gets fresh
/// `Lap(2 * scale)`. It halts on the first query whose noisy value falls at or
/// below the noisy threshold, i.e. the first time the error is small enough.
#[derive(Debug, Clone)]
pub struct AboveThreshold {
    noisy_threshold: f64,
    scale: f64,
    queries: usize,
    halted_at: Option<usize>,
}

impl AboveThreshold {
    /// `scale = 2 * sensitivity / epsilon`.
    pub fn new<R: Rng + ?Sized>(
        threshold: f64,
        sensitivity: f64,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(sensitivity >= 0.0) || !(epsilon > 0.0) {
            return Err(Error::InvalidPrivacy(format!(
                "need sensitivity >= 0 and epsilon > 0 (got {sensitivity}, {epsilon})"
            )));
        }
        Ok(Self::with_scale(threshold, 2.0 * sensitivity / epsilon, rng))
    }

    pub fn with_scale<R: Rng + ?Sized>(threshold: f64, scale: f64, rng: &mut R) -> Self {
        Self {
            noisy_threshold: threshold + laplace_scalar(scale, rng),
            scale,
            queries: 0,
            halted_at: None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Returns `true` when the mechanism halts on this query. `offset` is
    /// subtracted from `value` before comparison.
    pub fn query<R: Rng + ?Sized>(&mut self, value: f64, offset: f64, rng: &mut R) -> Result<bool> {
        if let Some(i) = self.halted_at {
            return Err(Error::AlreadyHalted(i));
        }
        let noisy = value - offset + laplace_scalar(2.0 * self.scale, rng);
        self.queries += 1;
        if noisy <= self.noisy_threshold {
            self.halted_at = Some(self.queries);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    /// 1-based index of the halting query.
    pub fn halted_at(&self) -> Option<usize> {
        self.halted_at
    }

    /// Accuracy guarantee over `queries` queries with failure probability
    /// `beta` and per-query sensitivity `sensitivity`:
    /// `8 * sensitivity * (ln T + ln(2/beta)) / epsilon`.
    pub fn accuracy(sensitivity: f64, epsilon: f64, queries: usize, beta: f64) -> f64 {
        8.0 * sensitivity * ((queries as f64).ln() + (2.0 / beta).ln()) / epsilon
    }
}

/// Replace-one sensitivity of the average of `n` messages clipped to `bound`.
pub fn replace_one_sensitivity(bound: f64, n: usize) -> f64 {
    2.0 * bound / n as f64
}

/// Checks that every row of every client message has norm at most `bound`.
pub fn assert_sensitivity(messages: &[SketchedVector], bound: f64) -> Result<()> {
    let tol = bound * 1e-12;
    for (client, m) in messages.iter().enumerate() {
        for row in 0..m.params().rows() {
            let norm = m.row_norm(row);
            if norm > bound + tol {
                return Err(Error::SensitivityViolation {
                    client,
                    row,
                    norm,
                    bound,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_from;

    #[test]
    fn norm_fme_sigma_matches_closed_form() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let cfg = calibrate(&b, 2.0, 10, Calibration::AdaptNormFme).unwrap();
        let expected = 1024.0 * (1e5f64).ln();
        assert!((cfg.sigma * cfg.sigma - expected).abs() < 1e-9 * expected);
        assert!((cfg.sigma_tilde - 0.8).abs() < 1e-15);
    }

    #[test]
    fn infinite_epsilon_switches_noise_off() {
        let cfg = calibrate(&PrivacyBudget::noiseless(), 2.0, 10, Calibration::AdaptNormFme).unwrap();
        assert_eq!(cfg.sigma, 0.0);
        assert_eq!(cfg.sigma_tilde, 0.0);
        let mut rng = stream_from(1);
        assert_eq!(gaussian_vector(3, 0.0, &mut rng), vec![0.0; 3]);
        assert_eq!(laplace_scalar(0.0, &mut rng), 0.0);
    }

    #[test]
    fn fl_split_is_nine_to_one() {
        let b = PrivacyBudget::noiseless();
        let cfg = calibrate(&b, 1.5, 4, Calibration::AdaptNormFl { noise_multiplier: 2.0 }).unwrap();
        assert!((cfg.sigma - 2.0 * 1.5 / 0.9f64.sqrt()).abs() < 1e-12);
        assert!((cfg.sigma_tilde - 2.0 * 1.5 / (0.1f64.sqrt() * 4.0)).abs() < 1e-12);
        let total = (cfg.sketch_std * 4.0).powi(2) * 0.9 + (cfg.sigma_tilde * 4.0).powi(2) * 0.1;
        assert!((total - 2.0 * (2.0 * 1.5f64).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(matches!(
            "adapt-foo".parse::<ProtocolTag>(),
            Err(Error::UnknownProtocol(_))
        ));
        assert_eq!("adapt-tail-fme".parse::<ProtocolTag>().unwrap(), ProtocolTag::AdaptTailFme);
    }

    #[test]
    fn query_after_halt_is_an_error() {
        let mut rng = stream_from(4);
        let mut at = AboveThreshold::with_scale(1.0, 0.0, &mut rng);
        assert!(!at.query(2.0, 0.0, &mut rng).unwrap());
        assert!(at.query(0.5, 0.0, &mut rng).unwrap());
        assert_eq!(at.halted_at(), Some(2));
        assert!(matches!(at.query(0.0, 0.0, &mut rng), Err(Error::AlreadyHalted(2))));
    }

    #[test]
    fn sensitivity_check_names_the_offender() {
        use crate::sketching::{SketchParams, SketchedVector};
        let p = SketchParams::new(2, 1, 2, 4).unwrap();
        let ok = SketchedVector::from_data(p, vec![0.6, 0.8, 0.0, 1.0]).unwrap();
        let bad = SketchedVector::from_data(p, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert!(assert_sensitivity(std::slice::from_ref(&ok), 1.0).is_ok());
        match assert_sensitivity(&[ok, bad], 1.0) {
            Err(Error::SensitivityViolation { client, row, norm, .. }) => {
                assert_eq!((client, row), (1, 1));
                assert!((norm - 5.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
