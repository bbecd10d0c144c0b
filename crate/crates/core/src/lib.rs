//! Adaptive sketch compression for differentially private federated mean
//! estimation and federated optimization under secure aggregation.
//!
//! The building blocks are linear sketches ([`sketching`]), calibrated noise
//! and a stopping rule ([`privacy`]), and a secure-aggregation simulator
//! ([`secagg`]). [`fme`] composes them into the adaptive mean-estimation
//! protocols and [`fedopt`] plugs them into federated averaging.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fedopt;
pub mod fme;
pub mod metrics;
pub mod privacy;
pub mod report;
pub mod secagg;
pub mod seed;
pub mod selftest;
pub mod sketching;

pub use error::{Error, Result};
pub use fedopt::{fedavg_run, FlConfig, FlRun, Protocol, RoundLog, RoundStats, SyntheticSpec, Task, TaskKind};
pub use fme::{adapt_norm_fme, adapt_tail_fme, run_fme, ClientPool, FmeConfig, FmeOutcome, FmeProtocol};
pub use metrics::{compression_rate, k_tail, mse, tail_norm, CommLedger};
pub use privacy::{calibrate, AboveThreshold, Calibration, NoiseConfig, PrivacyBudget, ProtocolTag};
pub use secagg::{FieldConfig, SecAggConfig, SecAggMode};
pub use sketching::{clip, top_k, SketchOperator, SketchParams, SketchedVector};
