//! Federated averaging with sketched, privatized mean estimation.
//!
//! Each round a cohort of clients trains locally, clips its model delta, and
//! the server estimates the mean delta with one of the [`Protocol`]s before a
//! momentum step.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::privacy::{calibrate, Calibration, NoiseConfig, PrivacyBudget};
use crate::secagg::{aggregate_dense, aggregate_sketches, SecAggConfig};
use crate::seed::{stream, sub_seed, Purpose, Stream};
use crate::sketching::{clip, clip_norm, l2_norm, SketchOperator, SketchParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    LinearRegression,
    LogisticRegression,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LinearRegression => "linear",
            Self::LogisticRegression => "logistic",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::LinearRegression),
            "logistic" => Ok(Self::LogisticRegression),
            other => Err(Error::InvalidTask(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Row-major examples with labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.features.extend_from_slice(x);
        self.labels.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn example(&self, i: usize) -> (&[f64], f64) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    kind: TaskKind,
    dim: usize,
    clients: Vec<Dataset>,
    validation: Dataset,
}

/// Parameters of a generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: TaskKind,
    pub dim: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub validation_samples: usize,
    /// Nonzero coordinates of the true model.
    pub informative: usize,
    /// Norm of the true model.
    pub signal: f64,
    /// Label noise std for regression.
    pub label_noise: f64,
    /// Std of the per-client feature shift.
    pub heterogeneity: f64,
}

impl SyntheticSpec {
    pub fn logistic(dim: usize, clients: usize) -> Self {
        Self {
            kind: TaskKind::LogisticRegression,
            dim,
            clients,
            samples_per_client: 20,
            validation_samples: 2000,
            informative: (dim / 10).max(1),
            signal: 4.0,
            label_noise: 0.0,
            heterogeneity: 0.2,
        }
    }

    pub fn linear(dim: usize, clients: usize) -> Self {
        Self {
            kind: TaskKind::LinearRegression,
            dim,
            clients,
            samples_per_client: 20,
            validation_samples: 1000,
            informative: dim,
            signal: 1.0,
            label_noise: 0.1,
            heterogeneity: 0.0,
        }
    }
}

impl Task {
    pub fn new(kind: TaskKind, dim: usize, clients: Vec<Dataset>, validation: Dataset) -> Result<Self> {
        if dim == 0 || clients.is_empty() || validation.is_empty() {
            return Err(Error::InvalidTask(
                "task needs dim >= 1, at least one client and validation data".into(),
            ));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.dim != dim || c.is_empty() {
                return Err(Error::InvalidTask(format!("client {i} has no data or wrong dim")));
            }
        }
        if validation.dim != dim {
            return Err(Error::InvalidTask("validation set has wrong dim".into()));
        }
        if kind == TaskKind::LogisticRegression {
            let bad = clients
                .iter()
                .chain(std::iter::once(&validation))
                .flat_map(|c| c.labels.iter())
                .any(|&y| y != 0.0 && y != 1.0);
            if bad {
                return Err(Error::InvalidTask("logistic labels must be 0 or 1".into()));
            }
        }
        Ok(Self {
            kind,
            dim,
            clients,
            validation,
        })
    }

    pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        if spec.informative == 0 || spec.informative > spec.dim {
            return Err(Error::InvalidTask(format!(
                "informative coordinates must be in 1..={}, got {}",
                spec.dim, spec.informative
            )));
        }
        let mut rng = stream(seed, 0, Purpose::TaskData);
        let support = index::sample(&mut rng, spec.dim, spec.informative);
        let mut truth = vec![0.0; spec.dim];
        for q in support.iter() {
            truth[q] = normal(&mut rng);
        }
        let scale = spec.signal / l2_norm(&truth).max(f64::MIN_POSITIVE);
        truth.iter_mut().for_each(|w| *w *= scale);

        let draw = |rng: &mut Stream, shift: &[f64], out: &mut Dataset, count: usize| -> Result<()> {
            let mut x = vec![0.0; spec.dim];
            for _ in 0..count {
                for (xi, s) in x.iter_mut().zip(shift) {
                    *xi = normal(rng) + s;
                }
                let t = dot(&truth, &x);
                let y = match spec.kind {
                    TaskKind::LinearRegression => t + spec.label_noise * normal(rng),
                    TaskKind::LogisticRegression => {
                        if rng.random::<f64>() < sigmoid(t) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                out.push(&x, y)?;
            }
            Ok(())
        };

        let mut clients = Vec::with_capacity(spec.clients);
        for _ in 0..spec.clients {
            let shift: Vec<f64> = (0..spec.dim)
                .map(|_| spec.heterogeneity * normal(&mut rng))
                .collect();
            let mut ds = Dataset::new(spec.dim);
            draw(&mut rng, &shift, &mut ds, spec.samples_per_client)?;
            clients.push(ds);
        }
        let mut validation = Dataset::new(spec.dim);
        draw(&mut rng, &vec![0.0; spec.dim], &mut validation, spec.validation_samples)?;
        Self::new(spec.kind, spec.dim, clients, validation)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn example_loss(&self, w: &[f64], x: &[f64], y: f64) -> f64 {
        let t = dot(w, x);
        match self.kind {
            TaskKind::LinearRegression => 0.5 * (t - y) * (t - y),
            TaskKind::LogisticRegression => softplus(t) - y * t,
        }
    }

    /// Mean loss over `data`, gradient added into `grad` when given.
    fn loss_grad(&self, w: &[f64], data: &Dataset, mut grad: Option<&mut [f64]>) -> f64 {
        let m = data.len() as f64;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut loss = 0.0;
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            let t = dot(w, x);
            loss += self.example_loss(w, x, y);
            if let Some(g) = grad.as_deref_mut() {
                let r = match self.kind {
                    TaskKind::LinearRegression => t - y,
                    TaskKind::LogisticRegression => sigmoid(t) - y,
                } / m;
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += r * xi;
                }
            }
        }
        loss / m
    }

    /// Model delta after `steps` full-batch gradient steps on client `c`.
    pub fn local_update(&self, w: &[f64], c: usize, steps: usize, lr: f64) -> Vec<f64> {
        let data = &self.clients[c];
        let mut local = w.to_vec();
        let mut grad = vec![0.0; self.dim];
        for _ in 0..steps {
            self.loss_grad(&local, data, Some(&mut grad));
            for (l, g) in local.iter_mut().zip(&grad) {
                *l -= lr * g;
            }
        }
        local.iter().zip(w).map(|(l, w)| l - w).collect()
    }

    /// Mean training loss over all clients.
    pub fn train_loss(&self, w: &[f64]) -> f64 {
        let total: f64 = self
            .clients
            .iter()
            .map(|c| self.loss_grad(w, c, None) * c.len() as f64)
            .sum();
        let count: usize = self.clients.iter().map(Dataset::len).sum();
        total / count as f64
    }

    /// Validation accuracy for classification, validation MSE for regression.
    pub fn validation_metric(&self, w: &[f64]) -> f64 {
        let v = &self.validation;
        match self.kind {
            TaskKind::LogisticRegression => {
                let correct = (0..v.len())
                    .filter(|&i| {
                        let (x, y) = v.example(i);
                        (dot(w, x) > 0.0) == (y == 1.0)
                    })
                    .count();
                correct as f64 / v.len() as f64
            }
            TaskKind::LinearRegression => 2.0 * self.loss_grad(w, v, None),
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Mean-estimation protocol used by the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    /// Exact mean of the clipped updates, no noise.
    ExactMean,
    /// Uncompressed mean with Gaussian noise.
    DpGaussian,
    /// Count-mean sketch at a fixed compression rate.
    FixedSketch { rate: f64 },
    AdaptNorm,
    TwoStage,
    AdaptTail,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ExactMean => "exact",
            Self::DpGaussian => "dp-gaussian",
            Self::FixedSketch { .. } => "fixed-sketch",
            Self::AdaptNorm => "adapt-norm",
            Self::TwoStage => "two-stage",
            Self::AdaptTail => "adapt-tail",
        }
    }

    /// Parses a protocol name; `fixed-sketch` takes its rate separately.
    pub fn parse(name: &str, fixed_rate: Option<f64>) -> Result<Self> {
        Ok(match name {
            "exact" => Self::ExactMean,
            "dp-gaussian" => Self::DpGaussian,
            "fixed-sketch" => Self::FixedSketch {
                rate: fixed_rate.ok_or_else(|| {
                    Error::InvalidConfig("fixed-sketch needs a compression rate".into())
                })?,
            },
            "adapt-norm" => Self::AdaptNorm,
            "two-stage" => Self::TwoStage,
            "adapt-tail" => Self::AdaptTail,
            other => return Err(Error::UnknownProtocol(other.to_string())),
        })
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the sketch width reacts to the noisy norm estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SizeRule {
    /// Width such that the sketching error is about `c0` times the privacy
    /// noise error; smaller `c0` means wider sketches.
    #[default]
    ErrorBalance,
    /// The same expression with `c0` multiplying instead of dividing.
    Literal,
}

/// Width update of the tail protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailRule {
    /// `C <- C (1 + eta sign(e - threshold))`.
    Sign { eta: f64 },
    /// `C <- C exp(eta (e - threshold) / threshold)`.
    Exponential { eta: f64 },
    /// `C <- C + step sign(e - threshold)`.
    Linear { step: f64 },
}

impl Default for TailRule {
    fn default() -> Self {
        Self::Sign { eta: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub clip_bound: f64,
    pub noise_multiplier: f64,
    pub c0: f64,
    /// Defaults to `ceil(ln d)`.
    pub sketch_rows: Option<usize>,
    /// Defaults to `ceil(ln d)`.
    pub sketch_pads: Option<usize>,
    /// Defaults to `ceil(ln d)`.
    pub second_pads: Option<usize>,
    pub second_cols: usize,
    /// Width of the first sketched round; defaults to the largest width that
    /// does not exceed `d` scalars.
    pub initial_cols: Option<usize>,
    pub warmup_rounds: usize,
    pub size_rule: SizeRule,
    pub tail_rule: TailRule,
    /// Zero any update whose l1 norm exceeds this.
    pub l1_zeroing: Option<f64>,
    pub secagg: SecAggConfig,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            clients_per_round: 50,
            local_steps: 1,
            client_lr: 0.1,
            server_lr: 1.0,
            server_momentum: 0.9,
            clip_bound: 1.0,
            noise_multiplier: 1.0,
            c0: 0.1,
            sketch_rows: None,
            sketch_pads: None,
            second_pads: None,
            second_cols: 2,
            initial_cols: None,
            warmup_rounds: 75,
            size_rule: SizeRule::ErrorBalance,
            tail_rule: TailRule::default(),
            l1_zeroing: None,
            secagg: SecAggConfig::ideal(),
        }
    }
}

impl FlConfig {
    pub fn validate(&self, task: &Task) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.clients_per_round == 0 || self.clients_per_round > task.num_clients() {
            return bad(format!(
                "clients_per_round must be in 1..={}, got {}",
                task.num_clients(),
                self.clients_per_round
            ));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(Error::InvalidClipBound(self.clip_bound));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad(format!("noise_multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return bad(format!("c0 must be positive, got {}", self.c0));
        }
        if !(self.client_lr >= 0.0 && self.server_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return bad(format!("server_momentum must be in [0,1), got {}", self.server_momentum));
        }
        if self.second_cols == 0 {
            return bad("second_cols must be >= 1".into());
        }
        for v in [self.sketch_rows, self.sketch_pads, self.second_pads, self.initial_cols]
            .into_iter()
            .flatten()
        {
            if v == 0 {
                return bad("sketch sizes must be >= 1".into());
            }
        }
        match self.tail_rule {
            TailRule::Sign { eta } | TailRule::Exponential { eta } if !(eta > 0.0) => {
                return bad(format!("eta must be positive, got {eta}"));
            }
            TailRule::Linear { step } if !(step > 0.0) => {
                return bad(format!("step must be positive, got {step}"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// What one round of mean estimation cost and observed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundStats {
    /// Main-sketch width, 0 for uncompressed rounds.
    pub cols: usize,
    pub first_scalars: u64,
    pub second_scalars: u64,
    /// Noisy norm or error estimate, when the protocol computes one.
    pub statistic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub stats: RoundStats,
    pub train_metric: f64,
    pub val_metric: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    rows: usize,
    pads: usize,
    second_pads: usize,
    second_cols: usize,
    cap: usize,
}

impl Shape {
    fn new(cfg: &FlConfig, d: usize) -> Self {
        let log_d = ((d as f64).ln().ceil() as usize).max(1);
        let rows = cfg.sketch_rows.unwrap_or(log_d);
        let pads = cfg.sketch_pads.unwrap_or(log_d);
        Self {
            rows,
            pads,
            second_pads: cfg.second_pads.unwrap_or(log_d),
            second_cols: cfg.second_cols,
            cap: (d / (rows * pads)).max(1),
        }
    }

    fn clamp_cols(&self, c: f64) -> f64 {
        if c.is_nan() {
            return self.cap as f64;
        }
        c.max(2.0).min(self.cap as f64)
    }
}

/// Shared per-round machinery for the sketching protocols.
#[derive(Debug, Clone)]
struct Sketcher {
    d: usize,
    shape: Shape,
    bound: f64,
    secagg: SecAggConfig,
}

impl Sketcher {
    #[allow(clippy::too_many_arguments)]
    fn sketch_mean<R: Rng>(
        &self,
        rows: usize,
        cols: usize,
        cohort: &[&[f64]],
        noise_std: f64,
        seed: u64,
        round: u64,
        rng: &mut R,
    ) -> Result<(SketchOperator, Vec<f64>, crate::sketching::SketchedVector)> {
        let op = SketchOperator::new(
            SketchParams::new(rows, self.shape.pads, cols, self.d)?,
            sub_seed(seed, round, Purpose::FirstSketch),
        );
        let mut nu = aggregate_sketches(
            &op,
            cohort,
            self.bound,
            &self.secagg,
            sub_seed(seed, round, Purpose::Masks),
            round,
        )?;
        nu.add_gaussian(noise_std, rng);
        let est = op.unsketch_median(&nu)?;
        Ok((op, est, nu))
    }

    fn check_sketch(
        &self,
        cohort: &[&[f64]],
        seed: u64,
        round: u64,
    ) -> Result<(SketchOperator, crate::sketching::SketchedVector)> {
        let op = SketchOperator::new(
            SketchParams::new(1, self.shape.second_pads, self.shape.second_cols, self.d)?,
            sub_seed(seed, round, Purpose::SecondSketch),
        );
        let nu = aggregate_sketches(
            &op,
            cohort,
            self.bound,
            &self.secagg,
            sub_seed(seed, round, Purpose::Masks) ^ 1,
            round,
        )?;
        Ok((op, nu))
    }

    fn second_scalars(&self) -> u64 {
        (self.shape.second_pads * self.shape.second_cols) as u64
    }
}

/// Width from a norm estimate (mean scale) for sketch noise std `s` per
/// coordinate of the mean.
fn width_from_norm(rule: SizeRule, c0: f64, norm: f64, slack: f64, pads: usize, s: f64) -> f64 {
    if s == 0.0 {
        return f64::INFINITY;
    }
    let x = (norm + slack).powi(2) / (pads as f64 * s * s);
    match rule {
        SizeRule::ErrorBalance => x / c0,
        SizeRule::Literal => c0 * x,
    }
}

/// One-shot norm-adaptive protocol: each round's norm estimate sizes the
/// next round's sketch.
#[derive(Debug, Clone)]
pub struct AdaptNormFl {
    sk: Sketcher,
    noise: NoiseConfig,
    full_std: f64,
    slack: f64,
    c0: f64,
    rule: SizeRule,
    cols: usize,
}

impl AdaptNormFl {
    pub fn new(cfg: &FlConfig, d: usize) -> Result<Self> {
        let shape = Shape::new(cfg, d);
        let n = cfg.clients_per_round as f64;
        let noise = calibrate(
            &PrivacyBudget::noiseless(),
            cfg.clip_bound,
            cfg.clients_per_round,
            Calibration::AdaptNormFl {
                noise_multiplier: cfg.noise_multiplier,
            },
        )?;
        let full_std = cfg.noise_multiplier * cfg.clip_bound / n;
        Ok(Self {
            cols: shape.clamp_cols(cfg.initial_cols.unwrap_or(shape.cap) as f64) as usize,
            sk: Sketcher {
                d,
                shape,
                bound: cfg.clip_bound,
                secagg: cfg.secagg,
            },
            noise,
            full_std,
            slack: 20f64.sqrt() * full_std,
            c0: cfg.c0,
            rule: cfg.size_rule,
        })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn round(&mut self, round: usize, cohort: &[&[f64]], seed: u64) -> Result<(Vec<f64>, RoundStats)> {
        let r = round as u64;
        let cols = self.cols;
        let mut rng = stream(seed, r, Purpose::SketchNoise);
        let (_, est, _) = self.sk.sketch_mean(
            self.sk.shape.rows,
            cols,
            cohort,
            self.noise.sketch_std,
            seed,
            r,
            &mut rng,
        )?;
        let (_, nu_check) = self.sk.check_sketch(cohort, seed, r)?;
        let norm = clip_norm(nu_check.norm(), self.sk.bound)
            + self.noise.draw_stat(&mut stream(seed, r, Purpose::StatNoise));
        let next = width_from_norm(self.rule, self.c0, norm, self.slack, self.sk.shape.pads, self.full_std);
        self.cols = self.sk.shape.clamp_cols(next.ceil()) as usize;
        Ok((
            est,
            RoundStats {
                cols,
                first_scalars: (self.sk.shape.rows * self.sk.shape.pads * cols) as u64,
                second_scalars: self.sk.second_scalars(),
                statistic: Some(norm),
            },
        ))
    }
}

/// Uncompressed warmup rounds estimate the norm, then the sketch width is
/// fixed for the rest of training.
#[derive(Debug, Clone)]
pub struct TwoStageFl {
    sk: Sketcher,
    noise: NoiseConfig,
    full_std: f64,
    slack: f64,
    c0: f64,
    rule: SizeRule,
    warmup: usize,
    norms: Vec<f64>,
    cols: Option<usize>,
}

impl TwoStageFl {
    pub fn new(cfg: &FlConfig, d: usize) -> Result<Self> {
        let a = AdaptNormFl::new(cfg, d)?;
        Ok(Self {
            sk: a.sk,
            noise: a.noise,
            full_std: a.full_std,
            slack: a.slack,
            c0: a.c0,
            rule: a.rule,
            warmup: cfg.warmup_rounds,
            norms: Vec::new(),
            cols: None,
        })
    }

    pub fn cols(&self) -> Option<usize> {
        self.cols
    }

    pub fn round(&mut self, round: usize, cohort: &[&[f64]], seed: u64) -> Result<(Vec<f64>, RoundStats)> {
        let r = round as u64;
        if self.norms.len() < self.warmup {
            let mean = aggregate_dense(
                cohort,
                self.sk.bound,
                &self.sk.secagg,
                sub_seed(seed, r, Purpose::Masks),
                r,
            )?;
            let norm = clip_norm(l2_norm(&mean), self.sk.bound)
                + self.noise.draw_stat(&mut stream(seed, r, Purpose::StatNoise));
            let mut rng = stream(seed, r, Purpose::SketchNoise);
            let est: Vec<f64> = mean
                .iter()
                .map(|m| m + self.noise.sketch_std * normal(&mut rng))
                .collect();
            self.norms.push(norm);
            return Ok((
                est,
                RoundStats {
                    cols: 0,
                    first_scalars: self.sk.d as u64,
                    second_scalars: 0,
                    statistic: Some(norm),
                },
            ));
        }
        let cols = match self.cols {
            Some(c) => c,
            None => {
                let avg = if self.norms.is_empty() {
                    0.0
                } else {
                    self.norms.iter().sum::<f64>() / self.norms.len() as f64
                };
                let w = width_from_norm(self.rule, self.c0, avg, self.slack, self.sk.shape.pads, self.full_std);
                let c = self.sk.shape.clamp_cols(w.ceil()) as usize;
                self.cols = Some(c);
                c
            }
        };
        let mut rng = stream(seed, r, Purpose::SketchNoise);
        let (_, est, _) =
            self.sk
                .sketch_mean(self.sk.shape.rows, cols, cohort, self.full_std, seed, r, &mut rng)?;
        Ok((
            est,
            RoundStats {
                cols,
                first_scalars: (self.sk.shape.rows * self.sk.shape.pads * cols) as u64,
                second_scalars: 0,
                statistic: None,
            },
        ))
    }
}

/// Multiplicative width control driven by a private error estimate.
#[derive(Debug, Clone)]
pub struct AdaptTailFl {
    sk: Sketcher,
    noise: NoiseConfig,
    threshold: f64,
    rule: TailRule,
    cols: f64,
}

impl AdaptTailFl {
    pub fn new(cfg: &FlConfig, d: usize) -> Result<Self> {
        let a = AdaptNormFl::new(cfg, d)?;
        let n = cfg.clients_per_round as f64;
        let sb = cfg.noise_multiplier * cfg.clip_bound;
        let threshold = cfg.c0 * (d as f64).sqrt() * sb / (0.9f64.sqrt() * n) + 2.0 * sb / (0.1f64.sqrt() * n);
        Ok(Self {
            cols: a.cols as f64,
            sk: a.sk,
            noise: a.noise,
            threshold,
            rule: cfg.tail_rule,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn cols(&self) -> usize {
        self.cols.ceil() as usize
    }

    fn update(&mut self, err: f64) {
        let gap = err - self.threshold;
        let sign = if gap > 0.0 {
            1.0
        } else if gap < 0.0 {
            -1.0
        } else {
            0.0
        };
        let next = match self.rule {
            TailRule::Sign { eta } => self.cols * (1.0 + eta * sign),
            TailRule::Exponential { eta } => {
                let rel = if self.threshold > 0.0 { gap / self.threshold } else { sign };
                self.cols * (eta * rel).clamp(-30.0, 30.0).exp()
            }
            TailRule::Linear { step } => self.cols + step * sign,
        };
        self.cols = self.sk.shape.clamp_cols(next);
    }

    pub fn round(&mut self, round: usize, cohort: &[&[f64]], seed: u64) -> Result<(Vec<f64>, RoundStats)> {
        let r = round as u64;
        let cols = self.cols();
        let mut rng = stream(seed, r, Purpose::SketchNoise);
        let (_, est, _) = self.sk.sketch_mean(
            self.sk.shape.rows,
            cols,
            cohort,
            self.noise.sketch_std,
            seed,
            r,
            &mut rng,
        )?;
        let (check_op, nu_check) = self.sk.check_sketch(cohort, seed, r)?;
        let err = crate::fme::resketch_error(&check_op, &est, &nu_check)?
            + self.noise.draw_stat(&mut stream(seed, r, Purpose::StatNoise));
        self.update(err);
        Ok((
            est,
            RoundStats {
                cols,
                first_scalars: (self.sk.shape.rows * self.sk.shape.pads * cols) as u64,
                second_scalars: self.sk.second_scalars(),
                statistic: Some(err),
            },
        ))
    }
}

#[derive(Debug, Clone)]
enum Estimator {
    Exact { secagg: SecAggConfig, bound: f64 },
    Gaussian { secagg: SecAggConfig, bound: f64, std: f64 },
    Fixed { sk: Sketcher, cols: usize, std: f64 },
    AdaptNorm(AdaptNormFl),
    TwoStage(TwoStageFl),
    AdaptTail(AdaptTailFl),
}

impl Estimator {
    fn new(protocol: Protocol, cfg: &FlConfig, d: usize) -> Result<Self> {
        let std = cfg.noise_multiplier * cfg.clip_bound / cfg.clients_per_round as f64;
        Ok(match protocol {
            Protocol::ExactMean => Self::Exact {
                secagg: cfg.secagg,
                bound: cfg.clip_bound,
            },
            Protocol::DpGaussian => Self::Gaussian {
                secagg: cfg.secagg,
                bound: cfg.clip_bound,
                std,
            },
            Protocol::FixedSketch { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::InvalidConfig(format!("fixed rate must be positive, got {rate}")));
                }
                let mut shape = Shape::new(cfg, d);
                shape.rows = 1;
                let cols = ((d as f64 / (rate * shape.pads as f64)).round() as usize).max(1);
                Self::Fixed {
                    sk: Sketcher {
                        d,
                        shape,
                        bound: cfg.clip_bound,
                        secagg: cfg.secagg,
                    },
                    cols,
                    std,
                }
            }
            Protocol::AdaptNorm => Self::AdaptNorm(AdaptNormFl::new(cfg, d)?),
            Protocol::TwoStage => Self::TwoStage(TwoStageFl::new(cfg, d)?),
            Protocol::AdaptTail => Self::AdaptTail(AdaptTailFl::new(cfg, d)?),
        })
    }

    fn estimate(&mut self, round: usize, cohort: &[&[f64]], seed: u64) -> Result<(Vec<f64>, RoundStats)> {
        let r = round as u64;
        let dense_stats = |d: usize| RoundStats {
            cols: 0,
            first_scalars: d as u64,
            second_scalars: 0,
            statistic: None,
        };
        match self {
            Self::Exact { secagg, bound } => {
                let m = aggregate_dense(cohort, *bound, secagg, sub_seed(seed, r, Purpose::Masks), r)?;
                let d = m.len();
                Ok((m, dense_stats(d)))
            }
            Self::Gaussian { secagg, bound, std } => {
                let mut m = aggregate_dense(cohort, *bound, secagg, sub_seed(seed, r, Purpose::Masks), r)?;
                let mut rng = stream(seed, r, Purpose::SketchNoise);
                if *std > 0.0 {
                    m.iter_mut().for_each(|x| *x += *std * normal(&mut rng));
                }
                let d = m.len();
                Ok((m, dense_stats(d)))
            }
            Self::Fixed { sk, cols, std } => {
                let mut rng = stream(seed, r, Purpose::SketchNoise);
                let (_, est, _) = sk.sketch_mean(1, *cols, cohort, *std, seed, r, &mut rng)?;
                Ok((
                    est,
                    RoundStats {
                        cols: *cols,
                        first_scalars: (sk.shape.pads * *cols) as u64,
                        second_scalars: 0,
                        statistic: None,
                    },
                ))
            }
            Self::AdaptNorm(p) => p.round(round, cohort, seed),
            Self::TwoStage(p) => p.round(round, cohort, seed),
            Self::AdaptTail(p) => p.round(round, cohort, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlRun {
    pub protocol: Protocol,
    pub dim: usize,
    pub logs: Vec<RoundLog>,
    pub model: Vec<f64>,
}

impl FlRun {
    /// `d * t / sum of scalars sent` after each round.
    pub fn cumulative_compression(&self) -> Vec<f64> {
        let mut sent = 0u64;
        self.logs
            .iter()
            .enumerate()
            .map(|(t, l)| {
                sent += l.stats.first_scalars + l.stats.second_scalars;
                self.dim as f64 * (t + 1) as f64 / sent.max(1) as f64
            })
            .collect()
    }

    pub fn compression_rate(&self) -> f64 {
        self.cumulative_compression().last().copied().unwrap_or(1.0)
    }

    pub fn final_val_metric(&self) -> Option<f64> {
        self.logs.last().map(|l| l.val_metric)
    }
}

/// Federated averaging with server momentum. Zero rounds returns the initial
/// (zero) model.
pub fn fedavg_run(task: &Task, cfg: &FlConfig, protocol: Protocol, seed: u64) -> Result<FlRun> {
    cfg.validate(task)?;
    let d = task.dim();
    let mut est = Estimator::new(protocol, cfg, d)?;
    let mut model = vec![0.0; d];
    let mut velocity = vec![0.0; d];
    let mut logs = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let r = round as u64;
        let mut rng = stream(seed, r, Purpose::Cohort);
        let mut picked = index::sample(&mut rng, task.num_clients(), cfg.clients_per_round).into_vec();
        picked.sort_unstable();
        let updates: Vec<Vec<f64>> = picked
            .iter()
            .map(|&c| {
                let z = task.local_update(&model, c, cfg.local_steps, cfg.client_lr);
                let z = match cfg.l1_zeroing {
                    Some(t) if z.iter().map(|x| x.abs()).sum::<f64>() > t => vec![0.0; d],
                    _ => z,
                };
                clip(&z, cfg.clip_bound)
            })
            .collect::<Result<_>>()?;
        let views: Vec<&[f64]> = updates.iter().map(Vec::as_slice).collect();
        let (mean, stats) = est.estimate(round, &views, seed)?;

        for ((v, w), m) in velocity.iter_mut().zip(model.iter_mut()).zip(&mean) {
            *v = cfg.server_momentum * *v + m;
            *w += cfg.server_lr * *v;
        }
        let train = task.train_loss(&model);
        let val = task.validation_metric(&model);
        logs.push(RoundLog {
            round,
            stats,
            train_metric: train,
            val_metric: val,
            update_norm: l2_norm(&mean),
        });
        if !train.is_finite() || model.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { round, logs });
        }
    }
    Ok(FlRun {
        protocol,
        dim: d,
        logs,
        model,
    })
}
