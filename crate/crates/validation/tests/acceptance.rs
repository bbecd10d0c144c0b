//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use fedsketch::fedopt::{fedavg_run, FlConfig, Protocol, SyntheticSpec, Task};
use fedsketch::fme::{adapt_norm_fme, adapt_tail_fme, FmeConfig, FmeProtocol, Replicated};
use fedsketch::metrics::{compression_rate, mse};
use fedsketch::privacy::{AboveThreshold, PrivacyBudget};
use fedsketch::report::{fedopt_rows, to_csv_string};
use fedsketch::secagg::{FieldConfig, SecAggConfig};
use fedsketch::seed::{derive, stream_from};
use fedsketch::sketching::{l2_norm, top_k, SketchOperator, SketchParams};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| gaussian(rng)).collect()
}

fn scaled(v: &[f64], norm: f64) -> Vec<f64> {
    let f = norm / l2_norm(v);
    v.iter().map(|x| x * f).collect()
}

/// Sketch MSE of a single count-mean sketch plus per-entry Gaussian noise
/// against its closed form `(d-1)/(PC) |mu|^2 + d sigma^2`.
fn instance_tightness() -> Verdict {
    let start = Instant::now();
    let (d, pads, cols, sigma) = (16, 2, 4, 0.1);
    let mu = scaled(&gaussian_vec(d, &mut stream_from(1)), 1.0);
    let expected = (d - 1) as f64 / (pads * cols) as f64 + d as f64 * sigma * sigma;
    let trials = 100_000u64;
    let params = SketchParams::new(1, pads, cols, d).unwrap();
    let mut rng = stream_from(2);
    let mut total = 0.0;
    for t in 0..trials {
        let op = SketchOperator::new(params, derive(100, &[t]));
        let mut s = op.sketch(&mu).unwrap();
        s.add_gaussian(sigma, &mut rng);
        total += mse(&op.unsketch_row(&s, 0).unwrap(), &mu).unwrap();
    }
    let got = total / trials as f64;
    let rel = (got - expected).abs() / expected;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        rel <= 0.03 && secs < 30.0,
        format!("mse={got:.4} expected={expected:.4} rel_err={:.2}% time={secs:.1}s", rel * 100.0),
    )
}

/// Per-coordinate mean of the norm protocol's estimate over many seeds stays
/// within 5 standard errors of the population mean.
fn norm_protocol_unbiased() -> Verdict {
    let (d, n, runs) = (32, 20, 20_000u64);
    let mut rng = stream_from(3);
    let pool: Vec<Vec<f64>> = (0..2 * n)
        .map(|_| {
            let v = gaussian_vec(d, &mut rng);
            let r: f64 = rng.random_range(0.2..1.0);
            scaled(&v, r)
        })
        .collect();
    let truth: Vec<f64> = (0..d)
        .map(|q| pool.iter().map(|z| z[q]).sum::<f64>() / pool.len() as f64)
        .collect();
    let cfg = FmeConfig::new(n, 1.0, PrivacyBudget::new(1.0, 1e-5).unwrap(), 0.02);
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut cols = (usize::MAX, 0);
    for s in 0..runs {
        let out = adapt_norm_fme(&pool, &cfg, s).unwrap();
        cols = (cols.0.min(out.final_cols()), cols.1.max(out.final_cols()));
        for q in 0..d {
            sum[q] += out.estimate[q];
            sq[q] += out.estimate[q] * out.estimate[q];
        }
    }
    let nr = runs as f64;
    let worst = (0..d)
        .map(|q| {
            let m = sum[q] / nr;
            let var = (sq[q] / nr - m * m).max(0.0);
            (m - truth[q]).abs() / (var / nr).sqrt()
        })
        .fold(0.0, f64::max);
    verdict(
        worst <= 5.0,
        format!("max |bias|/stderr={worst:.2} over d={d}, runs={runs}, sketch widths {}..={}", cols.0, cols.1),
    )
}

/// `(1-tau)|z|^2 <= |Sz|^2 <= (1+tau)|z|^2` fails for at most 10% of seeds.
fn jl_sandwich() -> Verdict {
    let (tau, beta, d) = (0.5f64, 0.05f64, 256);
    let pads = (2.0 * (1.0 / beta).ln() / tau).ceil() as usize;
    let z = gaussian_vec(d, &mut stream_from(4));
    let z2 = l2_norm(&z).powi(2);
    let params = SketchParams::new(1, pads, 2, d).unwrap();
    let seeds = 10_000u64;
    let violations = (0..seeds)
        .filter(|&s| {
            let n2 = SketchOperator::new(params, derive(200, &[s])).sketch(&z).unwrap().norm().powi(2);
            n2 < (1.0 - tau) * z2 || n2 > (1.0 + tau) * z2
        })
        .count();
    let rate = violations as f64 / seeds as f64;
    verdict(rate <= 0.10, format!("P={pads} C=2 violation rate={rate:.4}"))
}

/// Top-k of the median unsketch recovers a k-sparse vector exactly.
fn sparse_recovery() -> Verdict {
    let (k, d, beta) = (8usize, 1024usize, 0.05f64);
    let rows = (2.0 * (2.0 * d as f64 / beta).ln()).ceil() as usize;
    let pads = (2.0 * rows as f64 / beta).ln().ceil() as usize;
    let cols = 8 * pads * k;
    let params = SketchParams::new(rows, pads, cols, d).unwrap();
    let seeds = 1000u64;
    let mut rng = stream_from(5);
    let exact = (0..seeds)
        .filter(|&s| {
            let mut z = vec![0.0; d];
            for q in index::sample(&mut rng, d, k).iter() {
                z[q] = gaussian(&mut rng);
            }
            let op = SketchOperator::new(params, derive(300, &[s]));
            let est = top_k(&op.unsketch_median(&op.sketch(&z).unwrap()).unwrap(), k).unwrap();
            mse(&est, &z).unwrap() <= 1e-24 * l2_norm(&z).powi(2)
        })
        .count();
    let frac = exact as f64 / seeds as f64;
    verdict(frac >= 0.95, format!("R={rows} P={pads} C={cols} exact recovery {frac:.3}"))
}

/// Round-2 size of the norm protocol scales with the squared norm of the mean.
fn norm_scaling() -> Verdict {
    let (d, n, g, beta) = (1024usize, 100usize, 1.0f64, 1e-3f64);
    let budget = PrivacyBudget::new(1.0, 1e-5).unwrap();
    let cfg = FmeConfig::new(n, g, budget, beta);
    let direction = scaled(&gaussian_vec(d, &mut stream_from(6)), 1.0);
    let bound = g * g * d as f64 * budget.log_inv_delta() / (n * n) as f64 + g * g / n as f64;
    let constant = 2048.0;
    let seeds = 20u64;
    let mut scalars = Vec::new();
    let mut ratios = Vec::new();
    for m in [1.0, 0.5, 0.25] {
        let mu: Vec<f64> = direction.iter().map(|x| x * m * g).collect();
        let pool = Replicated::new(vec![mu.clone()], 2 * n).unwrap();
        let (mut sc, mut err) = (0.0, 0.0);
        for s in 0..seeds {
            let out = adapt_norm_fme(&pool, &cfg, s).unwrap();
            sc += out.scalars_per_round[1].first as f64;
            err += mse(&out.estimate, &mu).unwrap();
        }
        scalars.push(sc / seeds as f64);
        ratios.push(err / seeds as f64 / bound);
    }
    let ratio = scalars[0] / scalars[2];
    let mse_ok = ratios.iter().all(|r| *r <= constant);
    verdict(
        (8.0..=32.0).contains(&ratio) && mse_ok,
        format!(
            "round-2 scalars {:.0}/{:.0}/{:.0}, ratio M=1:M=1/4 = {ratio:.2} (need [8,32]); mse/bound = {:.1}/{:.1}/{:.1} (need <= {constant})",
            scalars[0], scalars[1], scalars[2], ratios[0], ratios[1], ratios[2]
        ),
    )
}

/// Halting width of the tail protocol grows linearly with the sparsity.
fn tail_halting() -> Verdict {
    let (d, n) = (4096usize, 6_000usize);
    let cfg = FmeConfig::new(n, 1.0, PrivacyBudget::noiseless(), 0.05);
    let max_rounds = d.ilog2() as usize;
    let mut per_k = Vec::new();
    let mut rounds_ok = true;
    let mut notes = Vec::new();
    for k in [4usize, 16, 64] {
        let mut mu = vec![0.0; d];
        let mut rng = stream_from(7 + k as u64);
        for q in index::sample(&mut rng, d, k).iter() {
            mu[q] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let mu = scaled(&mu, 1.0);
        let pool = Replicated::new(vec![mu.clone()], n * max_rounds).unwrap();
        let topk = adapt_tail_fme(&pool, &cfg, FmeProtocol::AdaptTailTopK, k as u64).unwrap();
        let plain = adapt_tail_fme(&pool, &cfg, FmeProtocol::AdaptTail, k as u64).unwrap();
        rounds_ok &= topk.rounds_used <= max_rounds && plain.rounds_used <= max_rounds && topk.halted;
        per_k.push(topk.final_cols() as f64 / k as f64);
        notes.push(format!(
            "k={k}: C={} rounds={} err={:.2e} (unbiased variant C={} rounds={})",
            topk.final_cols(),
            topk.rounds_used,
            mse(&topk.estimate, &mu).unwrap(),
            plain.final_cols(),
            plain.rounds_used
        ));
    }
    let spread = per_k.iter().cloned().fold(0.0, f64::max) / per_k.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        spread <= 2.0 && rounds_ok,
        format!("{}; C/k spread={spread:.2} (need <= 2), rounds <= {max_rounds}: {rounds_ok}", notes.join("; ")),
    )
}

/// The stopping rule halts at the right query when the gap is twice its
/// accuracy guarantee.
fn above_threshold() -> Verdict {
    let (sens, eps, queries, beta) = (1.0, 1.0, 10usize, 0.05);
    let alpha = AboveThreshold::accuracy(sens, eps, queries, beta);
    let threshold = 0.0;
    let trials = 1000u64;
    let mut rng = stream_from(8);
    let correct = (0..trials)
        .filter(|_| {
            let target = rng.random_range(1..=queries);
            let mut at = AboveThreshold::new(threshold, sens, eps, &mut rng).unwrap();
            for i in 1..=queries {
                let value = if i < target { threshold + alpha } else { threshold - alpha };
                if at.query(value, 0.0, &mut rng).unwrap() {
                    return i == target;
                }
            }
            false
        })
        .count();
    let frac = correct as f64 / trials as f64;
    verdict(frac >= 0.95, format!("alpha={alpha:.2}, correct halt in {frac:.3} of {trials}"))
}

/// Masked and ideal aggregation give the same estimate up to fixed-point
/// quantization.
fn secagg_equivalence() -> Verdict {
    let (d, n) = (256usize, 100usize);
    let mut rng = stream_from(9);
    let pool: Vec<Vec<f64>> = (0..2 * n)
        .map(|_| {
            let v = gaussian_vec(d, &mut rng);
            let r: f64 = rng.random_range(0.1..1.0);
            scaled(&v, r)
        })
        .collect();
    let ideal = FmeConfig::new(n, 1.0, PrivacyBudget::new(1.0, 1e-5).unwrap(), 1e-3);
    let masked = FmeConfig {
        secagg: SecAggConfig::masked(FieldConfig::new(64, 20).unwrap()),
        ..ideal.clone()
    };
    let mut worst = 0.0f64;
    let mut same_width = true;
    for s in 0..5 {
        let a = adapt_norm_fme(&pool, &ideal, s).unwrap();
        let b = adapt_norm_fme(&pool, &masked, s).unwrap();
        same_width &= a.final_cols() == b.final_cols();
        if same_width {
            worst = a
                .estimate
                .iter()
                .zip(&b.estimate)
                .map(|(x, y)| (x - y).abs())
                .fold(worst, f64::max);
        }
    }
    verdict(
        same_width && worst <= 1e-4,
        format!("max per-coordinate difference {worst:.3e}, same widths: {same_width}"),
    )
}

fn compression_arithmetic() -> Verdict {
    let r = compression_rate(100, &[20, 30], &[5, 5]).unwrap();
    verdict((r - 10.0 / 3.0).abs() <= 1e-9, format!("rate={r:.12}"))
}

struct FlSetup {
    task: Task,
    cfg: FlConfig,
}

fn fl_setup() -> FlSetup {
    let spec = SyntheticSpec::logistic(200, 500);
    FlSetup {
        task: Task::synthetic(&spec, 11).unwrap(),
        cfg: FlConfig {
            rounds: 300,
            clients_per_round: 50,
            local_steps: 1,
            client_lr: 0.5,
            server_lr: 0.5,
            server_momentum: 0.9,
            clip_bound: 1.0,
            noise_multiplier: 1.0,
            c0: 0.1,
            ..FlConfig::default()
        },
    }
}

struct FlSummary {
    rate: f64,
    accuracy: f64,
}

fn fl_summary(setup: &FlSetup, cfg: &FlConfig, protocol: Protocol, seeds: &[u64]) -> FlSummary {
    let runs: Vec<_> = seeds
        .iter()
        .map(|&s| fedavg_run(&setup.task, cfg, protocol, s).unwrap())
        .collect();
    let k = runs.len() as f64;
    FlSummary {
        rate: runs.iter().map(|r| r.compression_rate()).sum::<f64>() / k,
        accuracy: runs.iter().map(|r| r.final_val_metric().unwrap()).sum::<f64>() / k,
    }
}

/// Larger c0 compresses more and never helps accuracy.
fn c0_monotonicity(setup: &FlSetup) -> Verdict {
    let start = Instant::now();
    let grid = [0.01, 0.1, 0.25];
    let res: Vec<FlSummary> = grid
        .iter()
        .map(|&c0| {
            let cfg = FlConfig { c0, ..setup.cfg.clone() };
            fl_summary(setup, &cfg, Protocol::AdaptNorm, &[1, 2, 3])
        })
        .collect();
    let rates_up = res.windows(2).all(|w| w[1].rate > w[0].rate);
    let acc_down = res.windows(2).all(|w| w[1].accuracy <= w[0].accuracy + 0.002);
    let secs = start.elapsed().as_secs_f64();
    let cells: Vec<String> = grid
        .iter()
        .zip(&res)
        .map(|(c, r)| format!("c0={c}: rate={:.3} acc={:.4}", r.rate, r.accuracy))
        .collect();
    verdict(
        rates_up && acc_down && secs < 900.0,
        format!(
            "{}; rate strictly increasing: {rates_up}, accuracy nonincreasing: {acc_down}, time={secs:.0}s",
            cells.join("; ")
        ),
    )
}

/// Adaptive norm protocol stays within 2% of the uncompressed private
/// baseline while compressing at least 2x.
fn fl_accuracy(setup: &FlSetup) -> Verdict {
    let seeds = [1, 2, 3];
    let base = fl_summary(setup, &setup.cfg, Protocol::DpGaussian, &seeds);
    // d=200 is too small for the default ln(d) shape to compress; use a
    // shallower sketch and a larger c0.
    let cfg = FlConfig {
        c0: 6.0,
        sketch_rows: Some(3),
        sketch_pads: Some(3),
        ..setup.cfg.clone()
    };
    let adapt = fl_summary(setup, &cfg, Protocol::AdaptNorm, &seeds);
    let close = adapt.accuracy >= 0.98 * base.accuracy;
    verdict(
        close && adapt.rate >= 2.0,
        format!(
            "baseline acc={:.4}, adapt-norm acc={:.4} rate={:.3} (need acc >= {:.4}, rate >= 2)",
            base.accuracy,
            adapt.accuracy,
            adapt.rate,
            0.98 * base.accuracy
        ),
    )
}

/// Repeating a run gives a byte-identical CSV.
fn determinism(setup: &FlSetup) -> Verdict {
    let cfg = FlConfig { rounds: 50, ..setup.cfg.clone() };
    let csv = |protocol| {
        let run = fedavg_run(&setup.task, &cfg, protocol, 42).unwrap();
        to_csv_string(&fedopt_rows("det", 42, &cfg, &run)).unwrap()
    };
    let mut same = true;
    let mut bytes = 0;
    for p in [Protocol::AdaptNorm, Protocol::TwoStage, Protocol::AdaptTail] {
        let (a, b) = (csv(p), csv(p));
        bytes += a.len();
        same &= a == b;
    }
    verdict(same, format!("three protocols, {bytes} bytes compared, identical: {same}"))
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let setup = fl_setup();
    type Criterion<'a> = (&'a str, &'a str, Box<dyn Fn() -> Verdict + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("AC01", "instance tightness of sketch error", Box::new(instance_tightness)),
        ("AC02", "norm protocol unbiasedness", Box::new(norm_protocol_unbiased)),
        ("AC03", "norm preservation sandwich", Box::new(jl_sandwich)),
        ("AC04", "exact sparse recovery", Box::new(sparse_recovery)),
        ("AC05", "norm-adaptive sketch size", Box::new(norm_scaling)),
        ("AC06", "tail protocol halting", Box::new(tail_halting)),
        ("AC07", "above-threshold halting index", Box::new(above_threshold)),
        ("AC08", "masked vs ideal aggregation", Box::new(secagg_equivalence)),
        ("AC09", "compression arithmetic", Box::new(compression_arithmetic)),
        ("AC10", "c0 monotonicity", Box::new(|| c0_monotonicity(&setup))),
        ("AC11", "adaptive FL accuracy vs private baseline", Box::new(|| fl_accuracy(&setup))),
        ("AC12", "byte-identical reruns", Box::new(|| determinism(&setup))),
    ];
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if let Some(f) = &filter {
            if !id.contains(f.as_str()) {
                continue;
            }
        }
        let start = Instant::now();
        let v = run();
        if !v.passed {
            failed += 1;
        }
        println!(
            "{id} {} {name} [{:.1}s]: {}",
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    }
}
