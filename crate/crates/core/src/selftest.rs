//! Fast built-in checks, run by the `selftest` subcommand.

use crate::metrics::{compression_rate, tail_norm};
use crate::privacy::{calibrate, Calibration, PrivacyBudget};
use crate::secagg::{pairwise_masks, secagg_mean, FieldConfig, SecAggConfig};
use crate::seed::{stream, Purpose};
use crate::sketching::{SketchOperator, SketchParams};

use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn linearity() -> Check {
    let op = SketchOperator::new(SketchParams::new(3, 4, 8, 64).unwrap(), 11);
    let mut rng = stream(1, 0, Purpose::TaskData);
    let x: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (a, b) = (1.5, -0.25);
    let combo: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
    let lhs = op.sketch(&combo).unwrap();
    let (sx, sy) = (op.sketch(&x).unwrap(), op.sketch(&y).unwrap());
    let worst = lhs
        .as_slice()
        .iter()
        .zip(sx.as_slice().iter().zip(sy.as_slice()))
        .map(|(l, (p, q))| (l - (a * p + b * q)).abs() / (1.0 + l.abs()))
        .fold(0.0, f64::max);
    check("sketch linearity", worst <= 1e-12, format!("max relative gap {worst:.3e}"))
}

fn unbiasedness() -> Check {
    let d = 16;
    let mu: Vec<f64> = (0..d).map(|q| (q as f64 - 7.5) / 8.0).collect();
    let trials = 4000;
    let mut sum = vec![0.0; d];
    for t in 0..trials {
        let op = SketchOperator::new(SketchParams::new(1, 2, 4, d).unwrap(), t);
        let est = op.unsketch_row(&op.sketch(&mu).unwrap(), 0).unwrap();
        sum.iter_mut().zip(&est).for_each(|(s, e)| *s += e);
    }
    // per-coordinate std of one estimate is at most |mu| / sqrt(P C)
    let se = crate::sketching::l2_norm(&mu) / (8.0f64.sqrt() * (trials as f64).sqrt());
    let worst = sum
        .iter()
        .zip(&mu)
        .map(|(s, m)| (s / trials as f64 - m).abs() / se)
        .fold(0.0, f64::max);
    check("unsketch unbiased", worst < 5.0, format!("max deviation {worst:.2} std errors"))
}

fn masks() -> Check {
    let field = FieldConfig::default();
    let m = pairwise_masks(5, 32, 3, 1, &field).unwrap();
    let cancel = (0..32).all(|k| m.iter().fold(0u64, |a, v| a.wrapping_add(v[k])) == 0);
    let a = [0.25, -1.5, 3.0];
    let b = [1.0, 0.5, -2.0];
    let out = secagg_mean(&[&a, &b], &SecAggConfig::masked(field), 7, 1).unwrap();
    let exact = out == vec![0.625, -0.5, 0.5];
    check("mask cancellation", cancel && exact, format!("cancel={cancel} exact={exact}"))
}

fn arithmetic() -> Check {
    let r = compression_rate(100, &[20, 30], &[5, 5]).unwrap();
    let mut z = vec![0.0; 8];
    z[0] = 3.0;
    z[1] = 4.0;
    let t = tail_norm(&z, 1, 5.0).unwrap();
    let ok = (r - 10.0 / 3.0).abs() < 1e-9 && (t - 0.6).abs() < 1e-12;
    check("metric arithmetic", ok, format!("rate={r} tail={t}"))
}

fn calibration() -> Check {
    let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
    let cfg = calibrate(&b, 2.0, 10, Calibration::AdaptNormFme).unwrap();
    let expected = 1024.0 * 1e5f64.ln();
    let ok = (cfg.sigma * cfg.sigma - expected).abs() < 1e-9 * expected;
    check("noise calibration", ok, format!("sigma^2={}", cfg.sigma * cfg.sigma))
}

pub fn run_all() -> Vec<Check> {
    vec![linearity(), unbiasedness(), masks(), arithmetic(), calibration()]
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
