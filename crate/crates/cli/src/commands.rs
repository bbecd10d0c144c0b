//! Subcommand drivers: build core configs from the file, run, write CSV.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fedsketch::fedopt::{fedavg_run, FlConfig, FlRun, Protocol, SizeRule, SyntheticSpec, TailRule, Task, TaskKind};
use fedsketch::fme::{run_fme, ClientPool, FmeConfig, FmeProtocol, Replicated};
use fedsketch::privacy::{gaussian_vector, PrivacyBudget};
use fedsketch::report::{fedopt_rows, write_csv, FedoptRow, FmeRow};
use fedsketch::secagg::{FieldConfig, SecAggConfig, SecAggMode};
use fedsketch::seed::{stream, Purpose};
use fedsketch::sketching::{clip, l2_norm, top_k};
use fedsketch::Error;
use serde::Serialize;

use crate::config::{DataKind, ExperimentConfig, FlSection, FmeSection, SecAggSection, SweepKind, TaskKindName, TaskSection};
use crate::error::CliError;
use crate::genie::select_rate;

fn bad_key(key: &str, message: String) -> CliError {
    CliError::config(message, vec![key.to_string()])
}

fn secagg_config(s: &SecAggSection) -> Result<SecAggConfig, CliError> {
    let field = FieldConfig::new(s.modulus_bits.unwrap_or(64), s.scale_bits.unwrap_or(20))?;
    let mode = match s.mode.as_deref().unwrap_or("ideal") {
        "ideal" => SecAggMode::Ideal,
        "masked" => SecAggMode::Masked,
        other => return Err(bad_key("secagg.mode", format!("secagg.mode must be ideal or masked, got {other:?}"))),
    };
    Ok(SecAggConfig { mode, field })
}

fn fl_config(s: &FlSection, secagg: SecAggConfig) -> Result<(FlConfig, Protocol), CliError> {
    let d = FlConfig::default();
    let size_rule = match s.size_rule.as_deref() {
        None | Some("error-balance") => SizeRule::ErrorBalance,
        Some("literal") => SizeRule::Literal,
        Some(other) => {
            return Err(bad_key("fl.size_rule", format!("size_rule must be error-balance or literal, got {other:?}")))
        }
    };
    let eta = s.tail_eta.unwrap_or(0.2);
    let tail_rule = match s.tail_rule.as_deref() {
        None | Some("sign") => TailRule::Sign { eta },
        Some("exponential") => TailRule::Exponential { eta },
        Some("linear") => TailRule::Linear {
            step: s.tail_step.ok_or_else(|| bad_key("fl.tail_step", "linear tail rule needs tail_step".into()))?,
        },
        Some(other) => {
            return Err(bad_key(
                "fl.tail_rule",
                format!("tail_rule must be sign, exponential or linear, got {other:?}"),
            ))
        }
    };
    let protocol = Protocol::parse(&s.protocol, s.fixed_rate).map_err(|e| bad_key("fl.protocol", e.to_string()))?;
    let cfg = FlConfig {
        rounds: s.rounds.unwrap_or(d.rounds),
        clients_per_round: s.clients_per_round.unwrap_or(d.clients_per_round),
        local_steps: s.local_steps.unwrap_or(d.local_steps),
        client_lr: s.client_lr.unwrap_or(d.client_lr),
        server_lr: s.server_lr.unwrap_or(d.server_lr),
        server_momentum: s.server_momentum.unwrap_or(d.server_momentum),
        clip_bound: s.clip_bound.unwrap_or(d.clip_bound),
        noise_multiplier: s.noise_multiplier.unwrap_or(d.noise_multiplier),
        c0: s.c0.unwrap_or(d.c0),
        sketch_rows: s.sketch_rows,
        sketch_pads: s.sketch_pads,
        second_pads: s.second_pads,
        second_cols: s.second_cols.unwrap_or(d.second_cols),
        initial_cols: s.initial_cols,
        warmup_rounds: s.warmup_rounds.unwrap_or(d.warmup_rounds),
        size_rule,
        tail_rule,
        l1_zeroing: s.l1_zeroing,
        secagg,
    };
    Ok((cfg, protocol))
}

fn build_task(t: &TaskSection) -> Result<Task, CliError> {
    let mut spec = match t.kind {
        TaskKindName::Logistic => SyntheticSpec::logistic(t.dim, t.clients),
        TaskKindName::Linear => SyntheticSpec::linear(t.dim, t.clients),
    };
    if let Some(v) = t.samples_per_client {
        spec.samples_per_client = v;
    }
    if let Some(v) = t.validation_samples {
        spec.validation_samples = v;
    }
    if let Some(v) = t.informative {
        spec.informative = v;
    }
    if let Some(v) = t.signal {
        spec.signal = v;
    }
    if let Some(v) = t.label_noise {
        spec.label_noise = v;
    }
    if let Some(v) = t.heterogeneity {
        spec.heterogeneity = v;
    }
    Ok(Task::synthetic(&spec, t.data_seed)?)
}

fn fme_config(s: &FmeSection, secagg: SecAggConfig) -> Result<(FmeConfig, FmeProtocol), CliError> {
    let protocol: FmeProtocol = s.protocol.parse().map_err(|e: Error| bad_key("fme.protocol", e.to_string()))?;
    let budget = if s.epsilon == f64::INFINITY {
        PrivacyBudget::noiseless()
    } else {
        PrivacyBudget::new(s.epsilon, s.delta)?
    };
    let mut cfg = FmeConfig::new(s.n, s.norm_bound, budget, s.beta);
    if let Some(v) = s.pads_const {
        cfg.pads_const = v;
    }
    if let Some(v) = s.second_pads_const {
        cfg.second_pads_const = v;
    }
    if let Some(v) = s.sparsity_gamma {
        cfg.sparsity_gamma = v;
    }
    if let Some(v) = s.max_sketch_len {
        cfg.max_sketch_len = v;
    }
    cfg.check_sensitivity = s.check_sensitivity;
    cfg.secagg = secagg;
    Ok((cfg, protocol))
}

enum Pool {
    Dense(Vec<Vec<f64>>),
    Templates(Replicated),
}

impl Pool {
    fn as_dyn(&self) -> &dyn ClientPool {
        match self {
            Pool::Dense(v) => v,
            Pool::Templates(r) => r,
        }
    }
}

fn scaled(mut v: Vec<f64>, norm: f64) -> Vec<f64> {
    let n = l2_norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= norm / n);
    }
    v
}

fn read_client_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let key = || "fme.data_path".to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display()), vec![key()]))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display()), vec![key()]))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::config(format!("{} line {}: {e}", path.display(), i + 1), vec![key()]))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Pool size when none is given: enough disjoint cohorts for the longest
/// protocol run.
fn default_pool_size(n: usize, d: usize) -> usize {
    n * (d.max(2).ilog2() as usize + 2)
}

fn build_pool(s: &FmeSection) -> Result<Pool, CliError> {
    let mut rng = stream(s.data_seed, 0, Purpose::TaskData);
    let need = |key: &str, v: Option<usize>| v.ok_or_else(|| bad_key(key, format!("{key} is required for this data kind")));
    match s.data {
        DataKind::Sparse => {
            let d = need("fme.dim", s.dim)?;
            let k = need("fme.sparsity", s.sparsity)?;
            let norm = s.mean_norm.unwrap_or(s.norm_bound);
            let templates = (0..s.templates.unwrap_or(1).max(1))
                .map(|_| Ok(scaled(top_k(&gaussian_vector(d, 1.0, &mut rng), k)?, norm)))
                .collect::<Result<Vec<_>, Error>>()?;
            let count = s.pool_size.unwrap_or_else(|| default_pool_size(s.n, d));
            Ok(Pool::Templates(Replicated::new(templates, count)?))
        }
        DataKind::Gaussian => {
            let d = need("fme.dim", s.dim)?;
            let mean = scaled(gaussian_vector(d, 1.0, &mut rng), s.mean_norm.unwrap_or(0.5 * s.norm_bound));
            let spread = s.spread.unwrap_or(0.5 * s.norm_bound) / (d as f64).sqrt();
            let count = s.pool_size.unwrap_or_else(|| default_pool_size(s.n, d));
            let clients = (0..count)
                .map(|_| {
                    let z: Vec<f64> = gaussian_vector(d, spread, &mut rng).iter().zip(&mean).map(|(e, m)| e + m).collect();
                    clip(&z, s.norm_bound)
                })
                .collect::<Result<Vec<_>, Error>>()?;
            Ok(Pool::Dense(clients))
        }
        DataKind::Csv => {
            let path = s
                .data_path
                .as_ref()
                .ok_or_else(|| bad_key("fme.data_path", "csv data needs data_path".into()))?;
            let rows = read_client_csv(path)?;
            let d = rows.first().map_or(0, Vec::len);
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(bad_key("fme.data_path", "client rows must be nonempty and equally long".into()));
            }
            if s.dim.is_some_and(|want| want != d) {
                return Err(bad_key("fme.dim", format!("fme.dim does not match the {d} columns of the data")));
            }
            Ok(Pool::Dense(rows))
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let out = |source| CliError::Output {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(out)?;
    write_csv(BufWriter::new(file), rows).map_err(|e| match e {
        Error::Io(source) => out(source),
        other => CliError::Run(other),
    })
}

/// Runs one FedAvg experiment and appends its rows. On divergence the rows
/// of the finished rounds are kept and the error is returned.
fn run_fl(
    task: &Task,
    cfg: &FlConfig,
    protocol: Protocol,
    seed: u64,
    run_id: &str,
    rows: &mut Vec<FedoptRow>,
) -> Result<FlRun, Error> {
    match fedavg_run(task, cfg, protocol, seed) {
        Ok(run) => {
            rows.extend(fedopt_rows(run_id, seed, cfg, &run));
            Ok(run)
        }
        Err(Error::Diverged { round, logs }) => {
            let partial = FlRun {
                protocol,
                dim: task.dim(),
                logs,
                model: Vec::new(),
            };
            rows.extend(fedopt_rows(run_id, seed, cfg, &partial));
            Err(Error::Diverged { round, logs: Vec::new() })
        }
        Err(e) => Err(e),
    }
}

/// Writes whatever rows exist, then reports the first failure.
fn finish<T: Serialize>(path: &Path, rows: &[T], result: Result<(), CliError>) -> Result<(), CliError> {
    write_rows(path, rows)?;
    result?;
    eprintln!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn fme(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let section = cfg.fme.as_ref().ok_or_else(|| bad_key("fme", "missing [fme] table".into()))?;
    let (fme_cfg, protocol) = fme_config(section, secagg_config(&cfg.secagg)?)?;
    let pool = build_pool(section)?;
    let run_id = format!("fme-{protocol}");
    let mut rows = Vec::new();
    let result = cfg.seeds.iter().try_for_each(|&seed| {
        let out = run_fme(pool.as_dyn(), &fme_cfg, protocol, seed)?;
        rows.push(FmeRow::new(
            &run_id,
            seed,
            &out,
            fme_cfg.n,
            section.epsilon,
            section.delta,
            &out.cohort_mean,
        )?);
        Ok(())
    });
    finish(&cfg.output, &rows, result)
}

fn fl_parts(cfg: &ExperimentConfig) -> Result<(Task, FlConfig, Protocol), CliError> {
    let task = build_task(cfg.task.as_ref().ok_or_else(|| bad_key("task", "missing [task] table".into()))?)?;
    let fl = cfg.fl.as_ref().ok_or_else(|| bad_key("fl", "missing [fl] table".into()))?;
    let (fl_cfg, protocol) = fl_config(fl, secagg_config(&cfg.secagg)?)?;
    fl_cfg.validate(&task)?;
    Ok((task, fl_cfg, protocol))
}

pub fn fedopt(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (task, fl_cfg, protocol) = fl_parts(cfg)?;
    let mut rows = Vec::new();
    let result = cfg.seeds.iter().try_for_each(|&seed| {
        run_fl(&task, &fl_cfg, protocol, seed, protocol.name(), &mut rows)
            .map(drop)
            .map_err(CliError::from)
    });
    finish(&cfg.output, &rows, result)
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    group: String,
    protocol: String,
    noise_multiplier: f64,
    c0: Option<f64>,
    fixed_rate: Option<f64>,
    runs: usize,
    mean_compression_rate: f64,
    mean_final_metric: Option<f64>,
    selected: bool,
}

struct GroupStats {
    rate: f64,
    metric: Option<f64>,
}

fn group_stats(runs: &[FlRun]) -> GroupStats {
    let k = runs.len() as f64;
    let metrics: Vec<f64> = runs.iter().filter_map(FlRun::final_val_metric).collect();
    GroupStats {
        rate: runs.iter().map(FlRun::compression_rate).sum::<f64>() / k,
        metric: (metrics.len() == runs.len() && !metrics.is_empty()).then(|| metrics.iter().sum::<f64>() / k),
    }
}

/// `out.csv` becomes `out.summary.csv`.
fn summary_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.summary_output.clone().unwrap_or_else(|| cfg.output.with_extension("summary.csv"))
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (task, base_cfg, protocol) = fl_parts(cfg)?;
    let sw = cfg.sweep.as_ref().ok_or_else(|| bad_key("sweep", "missing [sweep] table".into()))?;
    let nms = sw.noise_multipliers.clone().unwrap_or(vec![base_cfg.noise_multiplier]);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let result = match sw.kind {
        SweepKind::C0 => {
            let grid = sw.c0.clone().ok_or_else(|| bad_key("sweep.c0", "a c0 sweep needs a c0 list".into()))?;
            c0_sweep(&task, &base_cfg, protocol, &grid, &nms, &cfg.seeds, &mut rows, &mut summary)
        }
        SweepKind::Genie => {
            let baseline = sw
                .baseline
                .as_deref()
                .ok_or_else(|| bad_key("sweep.baseline", "a genie sweep needs a baseline protocol".into()))?;
            let baseline = Protocol::parse(baseline, None).map_err(|e| bad_key("sweep.baseline", e.to_string()))?;
            let exponents = sw.rate_exponents.clone().unwrap_or((1..=13).collect());
            let higher = task.kind() == TaskKind::LogisticRegression;
            let plan = GeniePlan {
                baseline,
                exponents: &exponents,
                slack: sw.delta_slack,
                higher_is_better: higher,
            };
            genie_sweep(&task, &base_cfg, &plan, &nms, &cfg.seeds, &mut rows, &mut summary)
        }
    };
    write_rows(&summary_path(cfg), &summary)?;
    finish(&cfg.output, &rows, result)
}

#[allow(clippy::too_many_arguments)]
fn c0_sweep(
    task: &Task,
    base: &FlConfig,
    protocol: Protocol,
    grid: &[f64],
    nms: &[f64],
    seeds: &[u64],
    rows: &mut Vec<FedoptRow>,
    summary: &mut Vec<SummaryRow>,
) -> Result<(), CliError> {
    for &nm in nms {
        for &c0 in grid {
            let cfg = FlConfig {
                c0,
                noise_multiplier: nm,
                ..base.clone()
            };
            cfg.validate(task)?;
            let group = format!("c0={c0}/nm={nm}");
            let runs = seeds
                .iter()
                .map(|&s| run_fl(task, &cfg, protocol, s, &group, rows))
                .collect::<Result<Vec<_>, _>>()?;
            let st = group_stats(&runs);
            summary.push(SummaryRow {
                group,
                protocol: protocol.name().into(),
                noise_multiplier: nm,
                c0: Some(c0),
                fixed_rate: None,
                runs: runs.len(),
                mean_compression_rate: st.rate,
                mean_final_metric: st.metric,
                selected: false,
            });
        }
    }
    Ok(())
}

struct GeniePlan<'a> {
    baseline: Protocol,
    exponents: &'a [u32],
    slack: f64,
    higher_is_better: bool,
}

fn genie_sweep(
    task: &Task,
    base: &FlConfig,
    plan: &GeniePlan,
    nms: &[f64],
    seeds: &[u64],
    rows: &mut Vec<FedoptRow>,
    summary: &mut Vec<SummaryRow>,
) -> Result<(), CliError> {
    for &nm in nms {
        let cfg = FlConfig {
            noise_multiplier: nm,
            ..base.clone()
        };
        cfg.validate(task)?;
        let mut run_group = |protocol: Protocol, group: String, fixed_rate: Option<f64>| -> Result<GroupStats, CliError> {
            let runs = seeds
                .iter()
                .map(|&s| run_fl(task, &cfg, protocol, s, &group, rows))
                .collect::<Result<Vec<_>, _>>()?;
            let st = group_stats(&runs);
            summary.push(SummaryRow {
                group,
                protocol: protocol.name().into(),
                noise_multiplier: nm,
                c0: None,
                fixed_rate,
                runs: runs.len(),
                mean_compression_rate: st.rate,
                mean_final_metric: st.metric,
                selected: false,
            });
            Ok(st)
        };
        let baseline = run_group(plan.baseline, format!("baseline/nm={nm}"), None)?;
        let mut points = Vec::new();
        for &b in plan.exponents {
            let rate = 2f64.powi(b as i32);
            let st = run_group(Protocol::FixedSketch { rate }, format!("genie/nm={nm}/rate={rate}"), Some(rate))?;
            if let Some(m) = st.metric {
                points.push((st.rate, m));
            }
        }
        let chosen = select_rate(baseline.metric, &points, plan.slack, plan.higher_is_better)?;
        summary.push(SummaryRow {
            group: format!("genie-selected/nm={nm}"),
            protocol: "fixed-sketch".into(),
            noise_multiplier: nm,
            c0: None,
            fixed_rate: Some(chosen),
            runs: 0,
            mean_compression_rate: chosen,
            mean_final_metric: None,
            selected: true,
        });
    }
    Ok(())
}
