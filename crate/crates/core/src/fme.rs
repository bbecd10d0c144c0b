//! Adaptive federated mean estimation.
//!
//! [`adapt_norm_fme`] spends one round on a tiny sketch to estimate the norm
//! of the mean, then sizes the real sketch from it. [`adapt_tail_fme`] doubles
//! the sketch each round and stops once a second, independent sketch says the
//! estimate is accurate enough.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::privacy::{
    calibrate, laplace_scalar, replace_one_sensitivity, AboveThreshold, Calibration, NoiseConfig,
    PrivacyBudget,
};
use crate::secagg::{aggregate_sketches, SecAggConfig, SecAggMode};
use crate::seed::{stream, sub_seed, Purpose};
use crate::sketching::{clip_norm, top_k, SketchOperator, SketchParams, SketchedVector};

/// A population of clients, each holding one vector.
pub trait ClientPool {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn client(&self, i: usize) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClientPool for [Vec<f64>] {
    fn len(&self) -> usize {
        <[Vec<f64>]>::len(self)
    }

    fn dim(&self) -> usize {
        self.first().map_or(0, Vec::len)
    }

    fn client(&self, i: usize) -> &[f64] {
        &self[i]
    }
}

impl ClientPool for Vec<Vec<f64>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn dim(&self) -> usize {
        self.as_slice().dim()
    }

    fn client(&self, i: usize) -> &[f64] {
        &self[i]
    }
}

/// `count` clients cycling through a few template vectors. Client `i` holds
/// `templates[i % templates.len()]`.
#[derive(Debug, Clone)]
pub struct Replicated {
    templates: Vec<Vec<f64>>,
    count: usize,
}

impl Replicated {
    pub fn new(templates: Vec<Vec<f64>>, count: usize) -> Result<Self> {
        let d = templates
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidConfig("replicated pool needs a template".into()))?;
        if templates.iter().any(|t| t.len() != d) {
            return Err(Error::InvalidConfig("templates differ in length".into()));
        }
        Ok(Self { templates, count })
    }
}

impl ClientPool for Replicated {
    fn len(&self) -> usize {
        self.count
    }

    fn dim(&self) -> usize {
        self.templates[0].len()
    }

    fn client(&self, i: usize) -> &[f64] {
        &self.templates[i % self.templates.len()]
    }
}

/// Draws disjoint cohorts from a pool in a seeded random order.
#[derive(Debug, Clone)]
pub struct CohortSampler {
    order: Vec<usize>,
    next: usize,
}

impl CohortSampler {
    pub fn new(pool_len: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..pool_len).collect();
        order.shuffle(&mut stream(seed, 0, Purpose::Cohort));
        Self { order, next: 0 }
    }

    pub fn next_cohort(&mut self, n: usize) -> Result<&[usize]> {
        let end = self.next + n;
        if end > self.order.len() {
            return Err(Error::PoolExhausted {
                needed: end,
                available: self.order.len(),
            });
        }
        let c = &self.order[self.next..end];
        self.next = end;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FmeProtocol {
    AdaptNorm,
    AdaptTail,
    AdaptTailTopK,
}

impl FmeProtocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::AdaptNorm => "adapt-norm",
            Self::AdaptTail => "adapt-tail",
            Self::AdaptTailTopK => "adapt-tail-topk",
        }
    }
}

impl fmt::Display for FmeProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FmeProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapt-norm" => Ok(Self::AdaptNorm),
            "adapt-tail" => Ok(Self::AdaptTail),
            "adapt-tail-topk" => Ok(Self::AdaptTailTopK),
            other => Err(Error::UnknownProtocol(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmeConfig {
    /// Cohort size per round.
    pub n: usize,
    /// Bound on every client's vector norm.
    pub norm_bound: f64,
    pub budget: PrivacyBudget,
    /// Failure probability.
    pub beta: f64,
    /// Multiplier on the logarithmic pad counts of the main sketch.
    pub pads_const: f64,
    /// Multiplier on the logarithmic pad count of the error-estimation sketch.
    pub second_pads_const: f64,
    /// Relative tail level for the top-k variant, 0 for exactly sparse means.
    pub sparsity_gamma: f64,
    pub secagg: SecAggConfig,
    /// Verify the clip bound on every client message before aggregation.
    pub check_sensitivity: bool,
    /// Refuse to allocate sketches with more scalars than this.
    pub max_sketch_len: usize,
}

impl FmeConfig {
    pub fn new(n: usize, norm_bound: f64, budget: PrivacyBudget, beta: f64) -> Self {
        Self {
            n,
            norm_bound,
            budget,
            beta,
            pads_const: 1.0,
            second_pads_const: 1.0,
            sparsity_gamma: 0.0,
            secagg: SecAggConfig::ideal(),
            check_sensitivity: false,
            max_sketch_len: 1 << 26,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("cohort size n must be >= 1".into());
        }
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return bad(format!("norm bound must be positive, got {}", self.norm_bound));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must be in (0,1), got {}", self.beta));
        }
        if !(self.pads_const > 0.0 && self.second_pads_const > 0.0) {
            return bad("pad constants must be positive".into());
        }
        if !(self.sparsity_gamma >= 0.0) {
            return bad(format!("sparsity gamma must be >= 0, got {}", self.sparsity_gamma));
        }
        if self.secagg.mode == SecAggMode::Masked && self.n < 2 {
            return Err(Error::TooFewClients(self.n));
        }
        Ok(())
    }

    /// The largest failure probability the norm protocol accepts:
    /// `min(ln(1/delta) / (n eps)^2, 1)`.
    pub fn max_norm_beta(&self) -> f64 {
        let ne = self.n as f64 * self.budget.epsilon();
        (self.budget.log_inv_delta() / (ne * ne)).min(1.0)
    }
}

/// Scalars each client sends in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundScalars {
    pub first: u64,
    pub second: u64,
}

impl RoundScalars {
    pub fn total(&self) -> u64 {
        self.first + self.second
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchShape {
    pub rows: usize,
    pub pads: usize,
    pub second_pads: usize,
    pub second_cols: usize,
}

#[derive(Debug, Clone)]
pub struct FmeOutcome {
    pub protocol: FmeProtocol,
    pub estimate: Vec<f64>,
    pub scalars_per_round: Vec<RoundScalars>,
    /// Main-sketch width per round, 0 where no main sketch was sent.
    pub sketch_cols: Vec<usize>,
    pub rounds_used: usize,
    pub halted: bool,
    /// 1-based round at which the stopping rule fired.
    pub halt_index: Option<usize>,
    pub norm_estimate: Option<f64>,
    pub error_estimates: Vec<f64>,
    /// Stopping threshold or the additive slack used for sizing.
    pub threshold: f64,
    pub noise: NoiseConfig,
    pub shape: SketchShape,
    /// Unclipped mean of the cohort that produced the estimate.
    pub cohort_mean: Vec<f64>,
}

impl FmeOutcome {
    pub fn total_scalars(&self) -> u64 {
        self.scalars_per_round.iter().map(RoundScalars::total).sum()
    }

    pub fn final_cols(&self) -> usize {
        self.sketch_cols.last().copied().unwrap_or(0)
    }
}

/// `ceil(x)` as a size, rejecting non-finite values.
fn ceil_size(x: f64, what: &str) -> Result<usize> {
    if !x.is_finite() || x < 0.0 || x > usize::MAX as f64 / 2.0 {
        return Err(Error::InvalidConfig(format!("{what} evaluated to {x}")));
    }
    Ok(x.ceil() as usize)
}

fn check_len(params: SketchParams, limit: usize) -> Result<()> {
    if params.len() > limit {
        return Err(Error::SketchTooLarge {
            scalars: params.len(),
            limit,
        });
    }
    Ok(())
}

fn mean_of(views: &[&[f64]]) -> Vec<f64> {
    let d = views[0].len();
    let mut m = vec![0.0; d];
    for v in views {
        for (a, x) in m.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let inv = 1.0 / views.len() as f64;
    m.iter_mut().for_each(|x| *x *= inv);
    m
}

struct RoundCtx<'a, P: ClientPool + ?Sized> {
    pool: &'a P,
    cfg: &'a FmeConfig,
    seed: u64,
    sampler: CohortSampler,
}

impl<'a, P: ClientPool + ?Sized> RoundCtx<'a, P> {
    fn new(pool: &'a P, cfg: &'a FmeConfig, seed: u64) -> Result<Self> {
        if pool.dim() == 0 {
            return Err(Error::InvalidConfig("client vectors must be nonempty".into()));
        }
        Ok(Self {
            pool,
            cfg,
            seed,
            sampler: CohortSampler::new(pool.len(), seed),
        })
    }

    fn cohort(&mut self) -> Result<Vec<&'a [f64]>> {
        let d = self.pool.dim();
        let pool = self.pool;
        let idx = self.sampler.next_cohort(self.cfg.n)?;
        idx.iter()
            .map(|&i| {
                let z = pool.client(i);
                if z.len() != d {
                    Err(Error::DimensionMismatch {
                        expected: d,
                        got: z.len(),
                    })
                } else {
                    Ok(z)
                }
            })
            .collect()
    }

    fn aggregate(
        &self,
        op: &SketchOperator,
        cohort: &[&[f64]],
        bound: f64,
        round: u64,
    ) -> Result<SketchedVector> {
        if self.cfg.check_sensitivity {
            let msgs = cohort
                .iter()
                .map(|z| op.client_message(z, bound))
                .collect::<Result<Vec<_>>>()?;
            crate::privacy::assert_sensitivity(&msgs, bound)?;
        }
        aggregate_sketches(
            op,
            cohort,
            bound,
            &self.cfg.secagg,
            sub_seed(self.seed, round, Purpose::Masks),
            round,
        )
    }
}

/// Two-round protocol that sizes the sketch from a private norm estimate.
pub fn adapt_norm_fme<P: ClientPool + ?Sized>(
    pool: &P,
    cfg: &FmeConfig,
    seed: u64,
) -> Result<FmeOutcome> {
    cfg.validate()?;
    let eps = cfg.budget.epsilon();
    if eps.is_finite() && cfg.beta >= cfg.max_norm_beta() {
        return Err(Error::InvalidConfig(format!(
            "beta={} must be below min(ln(1/delta)/(n eps)^2, 1) = {}",
            cfg.beta,
            cfg.max_norm_beta()
        )));
    }
    let mut ctx = RoundCtx::new(pool, cfg, seed)?;
    let d = pool.dim();
    let nf = cfg.n as f64;
    let g = cfg.norm_bound;
    let b = 2.0 * g;
    let beta = cfg.beta;
    let pads = ceil_size(cfg.pads_const * (4.0 / beta).ln(), "pad count")?.max(1);
    let second_pads = ceil_size(cfg.second_pads_const * (4.0 / beta).ln(), "pad count")?.max(1);
    let second_cols = 2;
    let noise = calibrate(&cfg.budget, b, cfg.n, Calibration::AdaptNormFme)?;
    let slack = 2.0 * b * (8.0 / beta).ln() / (nf * eps) + b * (16.0 / beta).ln().sqrt() / nf.sqrt();

    // round 1: norm of the mean from a tiny sketch
    let cohort = ctx.cohort()?;
    let second = SketchOperator::new(
        SketchParams::new(1, second_pads, second_cols, d)?,
        sub_seed(seed, 1, Purpose::SecondSketch),
    );
    let nu_small = ctx.aggregate(&second, &cohort, b, 1)?;
    let norm_estimate = clip_norm(nu_small.norm(), b)
        + laplace_scalar(noise.sigma_tilde, &mut stream(seed, 1, Purpose::StatNoise));

    let budget_size = if eps.is_finite() {
        (nf * nf * eps * eps / cfg.budget.log_inv_delta()).min(nf * d as f64)
    } else {
        nf * d as f64
    };
    let cols = ceil_size(
        budget_size * (norm_estimate + slack).powi(2) / (g * g * pads as f64),
        "sketch width",
    )?
    .max(2);

    // round 2: the sized sketch
    let cohort = ctx.cohort()?;
    let params = SketchParams::new(1, pads, cols, d)?;
    check_len(params, cfg.max_sketch_len)?;
    let first = SketchOperator::new(params, sub_seed(seed, 2, Purpose::FirstSketch));
    let mut nu = ctx.aggregate(&first, &cohort, b, 2)?;
    nu.add_gaussian(noise.sketch_std, &mut stream(seed, 2, Purpose::SketchNoise));
    let estimate = first.unsketch_row(&nu, 0)?;

    Ok(FmeOutcome {
        protocol: FmeProtocol::AdaptNorm,
        estimate,
        scalars_per_round: vec![
            RoundScalars {
                first: 0,
                second: (second_pads * second_cols) as u64,
            },
            RoundScalars {
                first: (pads * cols) as u64,
                second: 0,
            },
        ],
        sketch_cols: vec![0, cols],
        rounds_used: 2,
        halted: true,
        halt_index: None,
        norm_estimate: Some(norm_estimate),
        error_estimates: Vec::new(),
        threshold: slack,
        noise,
        shape: SketchShape {
            rows: 1,
            pads,
            second_pads,
            second_cols,
        },
        cohort_mean: mean_of(&cohort),
    })
}

/// `|S(estimate) - sketch|`, the distance between a re-sketched estimate and
/// an independently sketched aggregate.
pub fn resketch_error(
    op: &SketchOperator,
    estimate: &[f64],
    sketch: &SketchedVector,
) -> Result<f64> {
    op.sketch(estimate)?.distance(sketch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailPlan {
    pub max_rounds: usize,
    pub rows: usize,
    pub pads: usize,
    pub first_cols: usize,
    pub second_pads: usize,
    pub second_cols: usize,
}

/// Sketch sizes for the tail protocol on dimension `d`.
pub fn tail_plan(d: usize, cfg: &FmeConfig) -> Result<TailPlan> {
    if d < 2 {
        return Err(Error::InvalidConfig(format!("tail protocol needs d >= 2, got {d}")));
    }
    let beta = cfg.beta;
    let df = d as f64;
    let ln_d = df.ln();
    let rows = ceil_size(2.0 * (8.0 * df * ln_d / beta).ln(), "row count")?.max(1);
    let pads = ceil_size(
        cfg.pads_const * 2.0 * (8.0 * rows as f64 * ln_d / beta).ln(),
        "pad count",
    )?
    .max(1);
    let second_pads = ceil_size(
        cfg.second_pads_const * 2.0 * (4.0 * df * ln_d / beta).ln(),
        "pad count",
    )?
    .max(1);
    Ok(TailPlan {
        max_rounds: d.ilog2() as usize,
        rows,
        pads,
        first_cols: 8 * pads,
        second_pads,
        second_cols: 2 * second_pads,
    })
}

/// Doubling protocol stopped by the above-threshold mechanism. With
/// `FmeProtocol::AdaptTailTopK` round `j` keeps the top `2^j` coordinates of
/// the estimate.
pub fn adapt_tail_fme<P: ClientPool + ?Sized>(
    pool: &P,
    cfg: &FmeConfig,
    protocol: FmeProtocol,
    seed: u64,
) -> Result<FmeOutcome> {
    if protocol == FmeProtocol::AdaptNorm {
        return adapt_norm_fme(pool, cfg, seed);
    }
    cfg.validate()?;
    let mut ctx = RoundCtx::new(pool, cfg, seed)?;
    let d = pool.dim();
    let plan = tail_plan(d, cfg)?;
    let nf = cfg.n as f64;
    let g = cfg.norm_bound;
    let b = 2.0 * g;
    let beta = cfg.beta;
    let eps = cfg.budget.epsilon();
    let ln_d = (d as f64).ln();
    let noise = calibrate(
        &cfg.budget,
        b,
        cfg.n,
        Calibration::AdaptTailFme {
            rows: plan.rows,
            dim: d,
        },
    )?;

    let stat = g * (8.0 * ln_d / beta).ln().sqrt() / nf.sqrt();
    let dp_slack = if eps.is_finite() {
        32.0 * b * ((plan.max_rounds as f64).ln() + (8.0 / beta).ln()) / (nf * eps)
    } else {
        0.0
    };
    let noise_per_coord = noise.sigma / nf;
    let threshold = match protocol {
        FmeProtocol::AdaptTailTopK => 16.0 * (cfg.sparsity_gamma * g + stat) + dp_slack,
        _ => 15.0 * stat.max((d as f64).sqrt() * noise_per_coord) + dp_slack,
    };
    let mut stopper = AboveThreshold::new(
        threshold,
        replace_one_sensitivity(b, cfg.n),
        eps,
        &mut stream(seed, 0, Purpose::ThresholdNoise),
    )?;

    let mut estimate = Vec::new();
    let mut cohort_mean = Vec::new();
    let mut scalars = Vec::new();
    let mut cols_log = Vec::new();
    let mut errors = Vec::new();
    let mut halted = false;

    for j in 1..=plan.max_rounds {
        let round = j as u64;
        let cols = plan.first_cols << (j - 1);
        let params = SketchParams::new(plan.rows, plan.pads, cols, d)?;
        check_len(params, cfg.max_sketch_len)?;
        let cohort = ctx.cohort()?;
        let first = SketchOperator::new(params, sub_seed(seed, round, Purpose::FirstSketch));
        let second = SketchOperator::new(
            SketchParams::new(1, plan.second_pads, plan.second_cols, d)?,
            sub_seed(seed, round, Purpose::SecondSketch),
        );
        let mut nu = ctx.aggregate(&first, &cohort, b, round)?;
        nu.add_gaussian(noise.sketch_std, &mut stream(seed, round, Purpose::SketchNoise));
        let nu_check = ctx.aggregate(&second, &cohort, b, round)?;

        let mut est = first.unsketch_median(&nu)?;
        let offset = if protocol == FmeProtocol::AdaptTailTopK {
            let k = (1usize << j).min(d);
            est = top_k(&est, k)?;
            16.0 * (k as f64).sqrt() * noise_per_coord
        } else {
            0.0
        };
        let err = resketch_error(&second, &est, &nu_check)?;
        errors.push(err);
        scalars.push(RoundScalars {
            first: params.len() as u64,
            second: (plan.second_pads * plan.second_cols) as u64,
        });
        cols_log.push(cols);
        estimate = est;
        cohort_mean = mean_of(&cohort);

        if stopper.query(err, offset, &mut stream(seed, round, Purpose::StatNoise))? {
            halted = true;
            break;
        }
    }

    Ok(FmeOutcome {
        protocol,
        estimate,
        rounds_used: scalars.len(),
        scalars_per_round: scalars,
        sketch_cols: cols_log,
        halted,
        halt_index: stopper.halted_at(),
        norm_estimate: None,
        error_estimates: errors,
        threshold,
        noise,
        shape: SketchShape {
            rows: plan.rows,
            pads: plan.pads,
            second_pads: plan.second_pads,
            second_cols: plan.second_cols,
        },
        cohort_mean,
    })
}

/// Runs `protocol` with the matching entry point.
pub fn run_fme<P: ClientPool + ?Sized>(
    pool: &P,
    cfg: &FmeConfig,
    protocol: FmeProtocol,
    seed: u64,
) -> Result<FmeOutcome> {
    match protocol {
        FmeProtocol::AdaptNorm => adapt_norm_fme(pool, cfg, seed),
        _ => adapt_tail_fme(pool, cfg, protocol, seed),
    }
}
