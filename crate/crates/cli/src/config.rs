//! Experiment configuration files.
//!
//! The format is TOML: a few top-level keys plus one table per concern.
//! Keys are checked against a fixed schema before deserializing so that every
//! unknown or missing key is reported at once.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::{Table, Value};

use crate::error::CliError;

/// Environment variable that replaces the `seeds` list with one seed.
pub const SEED_ENV: &str = "FEDSKETCH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Fme,
    Fedopt,
    Sweep,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fme => "fme",
            Mode::Fedopt => "fedopt",
            Mode::Sweep => "sweep",
        }
    }
}

/// The `mode` key is read separately by [`parse`].
#[derive(Debug, Clone, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub summary_output: Option<PathBuf>,
    pub task: Option<TaskSection>,
    pub fl: Option<FlSection>,
    pub fme: Option<FmeSection>,
    #[serde(default)]
    pub secagg: SecAggSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKindName {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TaskSection {
    pub kind: TaskKindName,
    pub dim: usize,
    pub clients: usize,
    pub samples_per_client: Option<usize>,
    pub validation_samples: Option<usize>,
    pub informative: Option<usize>,
    pub signal: Option<f64>,
    pub label_noise: Option<f64>,
    pub heterogeneity: Option<f64>,
    #[serde(default)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FlSection {
    pub protocol: String,
    pub fixed_rate: Option<f64>,
    pub rounds: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub local_steps: Option<usize>,
    pub client_lr: Option<f64>,
    pub server_lr: Option<f64>,
    pub server_momentum: Option<f64>,
    pub clip_bound: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub c0: Option<f64>,
    pub sketch_rows: Option<usize>,
    pub sketch_pads: Option<usize>,
    pub second_pads: Option<usize>,
    pub second_cols: Option<usize>,
    pub initial_cols: Option<usize>,
    pub warmup_rounds: Option<usize>,
    pub size_rule: Option<String>,
    pub tail_rule: Option<String>,
    pub tail_eta: Option<f64>,
    pub tail_step: Option<f64>,
    pub l1_zeroing: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Clients cycle through a few random k-sparse vectors.
    Sparse,
    /// A shared mean plus isotropic Gaussian spread, clipped to the bound.
    Gaussian,
    /// One client vector per CSV line.
    Csv,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FmeSection {
    pub protocol: String,
    pub n: usize,
    pub data: DataKind,
    pub dim: Option<usize>,
    #[serde(default = "one")]
    pub norm_bound: f64,
    #[serde(default = "one")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub pads_const: Option<f64>,
    pub second_pads_const: Option<f64>,
    pub sparsity_gamma: Option<f64>,
    #[serde(default)]
    pub check_sensitivity: bool,
    pub max_sketch_len: Option<usize>,
    pub pool_size: Option<usize>,
    pub sparsity: Option<usize>,
    pub templates: Option<usize>,
    pub mean_norm: Option<f64>,
    pub spread: Option<f64>,
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    1e-5
}

fn default_beta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SecAggSection {
    pub mode: Option<String>,
    pub modulus_bits: Option<u32>,
    pub scale_bits: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    C0,
    Genie,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub c0: Option<Vec<f64>>,
    pub noise_multipliers: Option<Vec<f64>>,
    pub rate_exponents: Option<Vec<u32>>,
    pub baseline: Option<String>,
    #[serde(default = "default_slack")]
    pub delta_slack: f64,
}

fn default_slack() -> f64 {
    0.01
}

/// `(key, required)` for each table.
const TOP: &[(&str, bool)] = &[
    ("mode", false),
    ("seeds", true),
    ("output", true),
    ("summary_output", false),
    ("task", false),
    ("fl", false),
    ("fme", false),
    ("secagg", false),
    ("sweep", false),
];
const TASK: &[(&str, bool)] = &[
    ("kind", true),
    ("dim", true),
    ("clients", true),
    ("samples_per_client", false),
    ("validation_samples", false),
    ("informative", false),
    ("signal", false),
    ("label_noise", false),
    ("heterogeneity", false),
    ("data_seed", false),
];
const FL: &[(&str, bool)] = &[
    ("protocol", true),
    ("fixed_rate", false),
    ("rounds", false),
    ("clients_per_round", false),
    ("local_steps", false),
    ("client_lr", false),
    ("server_lr", false),
    ("server_momentum", false),
    ("clip_bound", false),
    ("noise_multiplier", false),
    ("c0", false),
    ("sketch_rows", false),
    ("sketch_pads", false),
    ("second_pads", false),
    ("second_cols", false),
    ("initial_cols", false),
    ("warmup_rounds", false),
    ("size_rule", false),
    ("tail_rule", false),
    ("tail_eta", false),
    ("tail_step", false),
    ("l1_zeroing", false),
];
const FME: &[(&str, bool)] = &[
    ("protocol", true),
    ("n", true),
    ("data", true),
    ("dim", false),
    ("norm_bound", false),
    ("epsilon", false),
    ("delta", false),
    ("beta", false),
    ("pads_const", false),
    ("second_pads_const", false),
    ("sparsity_gamma", false),
    ("check_sensitivity", false),
    ("max_sketch_len", false),
    ("pool_size", false),
    ("sparsity", false),
    ("templates", false),
    ("mean_norm", false),
    ("spread", false),
    ("data_path", false),
    ("data_seed", false),
];
const SECAGG: &[(&str, bool)] = &[("mode", false), ("modulus_bits", false), ("scale_bits", false)];
const SWEEP: &[(&str, bool)] = &[
    ("kind", true),
    ("c0", false),
    ("noise_multipliers", false),
    ("rate_exponents", false),
    ("baseline", false),
    ("delta_slack", false),
];

fn check_table(table: &Table, prefix: &str, schema: &[(&str, bool)], problems: &mut Vec<String>) {
    let known: BTreeSet<&str> = schema.iter().map(|(k, _)| *k).collect();
    for key in table.keys() {
        if !known.contains(key.as_str()) {
            problems.push(format!("{prefix}{key}: unknown key"));
        }
    }
    for (key, required) in schema {
        if *required && !table.contains_key(*key) {
            problems.push(format!("{prefix}{key}: missing required key"));
        }
    }
}

fn require(problems: &mut Vec<String>, present: bool, key: &str, why: &str) {
    if !present {
        problems.push(format!("{key}: required {why}"));
    }
}

/// Checks keys against the schema and the per-mode requirements. Returns
/// the offending keys, each with a short reason.
fn schema_problems(root: &Table, mode: Mode) -> Vec<String> {
    let mut problems = Vec::new();
    check_table(root, "", TOP, &mut problems);
    let sections: [(&str, &[(&str, bool)]); 5] =
        [("task", TASK), ("fl", FL), ("fme", FME), ("secagg", SECAGG), ("sweep", SWEEP)];
    for (name, schema) in sections {
        match root.get(name) {
            Some(Value::Table(t)) => check_table(t, &format!("{name}."), schema, &mut problems),
            Some(_) => problems.push(format!("{name}: must be a table")),
            None => {}
        }
    }
    let has = |name: &str| root.get(name).is_some_and(Value::is_table);
    let sub = |name: &str, key: &str| {
        root.get(name)
            .and_then(Value::as_table)
            .and_then(|t| t.get(key))
            .and_then(Value::as_str)
            .map(str::to_string)
    };
    let sub_has = |name: &str, key: &str| {
        root.get(name)
            .and_then(Value::as_table)
            .is_some_and(|t| t.contains_key(key))
    };
    match mode {
        Mode::Fme => {
            require(&mut problems, has("fme"), "fme", "for fme mode");
            match sub("fme", "data").as_deref() {
                Some("csv") => require(&mut problems, sub_has("fme", "data_path"), "fme.data_path", "when fme.data = \"csv\""),
                Some("sparse") => {
                    require(&mut problems, sub_has("fme", "dim"), "fme.dim", "when fme.data = \"sparse\"");
                    require(&mut problems, sub_has("fme", "sparsity"), "fme.sparsity", "when fme.data = \"sparse\"");
                }
                Some("gaussian") => require(&mut problems, sub_has("fme", "dim"), "fme.dim", "when fme.data = \"gaussian\""),
                _ => {}
            }
        }
        Mode::Fedopt | Mode::Sweep => {
            require(&mut problems, has("task"), "task", "for fedopt and sweep modes");
            require(&mut problems, has("fl"), "fl", "for fedopt and sweep modes");
            if sub("fl", "protocol").as_deref() == Some("fixed-sketch") {
                require(&mut problems, sub_has("fl", "fixed_rate"), "fl.fixed_rate", "for the fixed-sketch protocol");
            }
            if sub("fl", "tail_rule").as_deref() == Some("linear") {
                require(&mut problems, sub_has("fl", "tail_step"), "fl.tail_step", "for the linear tail rule");
            }
        }
    }
    if mode == Mode::Sweep {
        require(&mut problems, has("sweep"), "sweep", "for sweep mode");
        match sub("sweep", "kind").as_deref() {
            Some("c0") => require(&mut problems, sub_has("sweep", "c0"), "sweep.c0", "for a c0 sweep"),
            Some("genie") => require(&mut problems, sub_has("sweep", "baseline"), "sweep.baseline", "for a genie sweep"),
            _ => {}
        }
    }
    problems
}

/// Parses and validates a configuration for the given subcommand. `None`
/// takes the mode from the file.
pub fn parse(text: &str, mode: Option<Mode>) -> Result<(Mode, ExperimentConfig), CliError> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::config(format!("not valid TOML: {}", e.message()), vec![]))?;
    let file_mode = match root.get("mode") {
        None => None,
        Some(v) => Some(
            Mode::deserialize(v.clone())
                .map_err(|_| CliError::config("mode must be fme, fedopt or sweep", vec!["mode".into()]))?,
        ),
    };
    let mode = match (mode, file_mode) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::config(
                format!("file is for mode {}, not {}", b.as_str(), a.as_str()),
                vec!["mode".into()],
            ))
        }
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => return Err(CliError::config("mode is not set", vec!["mode".into()])),
    };
    let problems = schema_problems(&root, mode);
    if !problems.is_empty() {
        return Err(CliError::config("configuration has invalid keys", problems));
    }
    let mut cfg = ExperimentConfig::deserialize(root)
        .map_err(|e| CliError::config(e.message().to_string(), vec![]))?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"), vec![]))?;
        cfg.seeds = vec![seed];
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::config("seeds must list at least one seed", vec!["seeds".into()]));
    }
    Ok((mode, cfg))
}

pub fn load(path: &Path, mode: Option<Mode>) -> Result<(Mode, ExperimentConfig), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display()), vec![]))?;
    parse(&text, mode)
}
