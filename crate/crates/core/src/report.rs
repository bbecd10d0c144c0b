//! CSV output. Column order is fixed and float formatting is shortest
//! round-trip, so identical runs produce byte-identical files.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::fedopt::{FlConfig, FlRun};
use crate::fme::FmeOutcome;
use crate::metrics::compression_rate;

pub const FEDOPT_COLUMNS: [&str; 13] = [
    "run_id",
    "seed",
    "round",
    "protocol",
    "noise_multiplier",
    "c0",
    "C_j",
    "first_scalars",
    "second_scalars",
    "norm_or_error_estimate",
    "train_metric",
    "val_metric",
    "cum_compression_rate",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FedoptRow {
    pub run_id: String,
    pub seed: u64,
    pub round: usize,
    pub protocol: String,
    pub noise_multiplier: f64,
    pub c0: f64,
    #[serde(rename = "C_j")]
    pub cols: usize,
    pub first_scalars: u64,
    pub second_scalars: u64,
    pub norm_or_error_estimate: Option<f64>,
    pub train_metric: f64,
    pub val_metric: f64,
    pub cum_compression_rate: f64,
}

pub fn fedopt_rows(run_id: &str, seed: u64, cfg: &FlConfig, run: &FlRun) -> Vec<FedoptRow> {
    run.logs
        .iter()
        .zip(run.cumulative_compression())
        .map(|(l, cum)| FedoptRow {
            run_id: run_id.to_string(),
            seed,
            round: l.round,
            protocol: run.protocol.name().to_string(),
            noise_multiplier: cfg.noise_multiplier,
            c0: cfg.c0,
            cols: l.stats.cols,
            first_scalars: l.stats.first_scalars,
            second_scalars: l.stats.second_scalars,
            norm_or_error_estimate: l.stats.statistic,
            train_metric: l.train_metric,
            val_metric: l.val_metric,
            cum_compression_rate: cum,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmeRow {
    pub run_id: String,
    pub seed: u64,
    pub protocol: String,
    pub n: usize,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub rounds_used: usize,
    pub halted: bool,
    pub halt_index: Option<usize>,
    pub final_cols: usize,
    pub first_scalars: u64,
    pub second_scalars: u64,
    pub norm_estimate: Option<f64>,
    pub last_error_estimate: Option<f64>,
    pub threshold: f64,
    pub mse: f64,
    pub compression_rate: f64,
}

impl FmeRow {
    /// Summarizes one FME run. `truth` is the mean the error is measured
    /// against.
    pub fn new(
        run_id: &str,
        seed: u64,
        out: &FmeOutcome,
        n: usize,
        epsilon: f64,
        delta: f64,
        truth: &[f64],
    ) -> Result<Self> {
        let d = out.estimate.len();
        let first: Vec<u64> = out.scalars_per_round.iter().map(|r| r.first).collect();
        let second: Vec<u64> = out.scalars_per_round.iter().map(|r| r.second).collect();
        Ok(Self {
            run_id: run_id.to_string(),
            seed,
            protocol: out.protocol.as_str().to_string(),
            n,
            d,
            epsilon,
            delta,
            rounds_used: out.rounds_used,
            halted: out.halted,
            halt_index: out.halt_index,
            final_cols: out.final_cols(),
            first_scalars: first.iter().sum(),
            second_scalars: second.iter().sum(),
            norm_estimate: out.norm_estimate,
            last_error_estimate: out.error_estimates.last().copied(),
            threshold: out.threshold,
            mse: crate::metrics::mse(&out.estimate, truth)?,
            compression_rate: compression_rate(d, &first, &second)?,
        })
    }
}

/// Writes `rows` with a header line. An empty slice writes nothing.
pub fn write_csv<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_column_list() {
        let row = FedoptRow {
            run_id: "r".into(),
            seed: 1,
            round: 1,
            protocol: "exact".into(),
            noise_multiplier: 1.0,
            c0: 0.1,
            cols: 0,
            first_scalars: 10,
            second_scalars: 0,
            norm_or_error_estimate: None,
            train_metric: 0.5,
            val_metric: 0.75,
            cum_compression_rate: 1.0,
        };
        let s = to_csv_string(&[row]).unwrap();
        let header = s.lines().next().unwrap();
        assert_eq!(header, FEDOPT_COLUMNS.join(","));
        assert_eq!(s.lines().nth(1).unwrap(), "r,1,1,exact,1.0,0.1,0,10,0,,0.5,0.75,1.0");
    }
}
