//! Best fixed compression rate within an accuracy slack of the uncompressed
//! baseline.

use crate::error::CliError;

/// Largest compression rate whose metric stays within `slack` (relative) of
/// `baseline`.
///
/// `points` are `(rate, metric)` pairs from fixed-rate runs. The baseline
/// counts as rate 1. Past the last acceptable grid point the metric is
/// interpolated linearly in `log2(rate)` toward the next point, and the rate
/// where it crosses the target is returned.
pub fn select_rate(
    baseline: Option<f64>,
    points: &[(f64, f64)],
    slack: f64,
    higher_is_better: bool,
) -> Result<f64, CliError> {
    let base = baseline.ok_or_else(|| {
        CliError::config("genie selection needs an uncompressed baseline", vec!["sweep.baseline".into()])
    })?;
    if slack.is_nan() || slack < 0.0 {
        return Err(CliError::config("delta_slack must be >= 0", vec!["sweep.delta_slack".into()]));
    }
    let margin = if slack.is_infinite() { f64::INFINITY } else { slack * base.abs() };
    let target = if higher_is_better { base - margin } else { base + margin };
    let ok = |m: f64| if higher_is_better { m >= target } else { m <= target };

    let mut pts: Vec<(f64, f64)> = std::iter::once((1.0, base)).chain(points.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let best = pts
        .iter()
        .rposition(|p| ok(p.1))
        .ok_or_else(|| fedsketch::Error::InvalidMetric(format!("baseline metric is {base}")))?;
    let Some(&(r1, m1)) = pts.get(best + 1) else {
        return Ok(pts[best].0);
    };
    let (r0, m0) = pts[best];
    if m1 == m0 {
        return Ok(r0);
    }
    let t = ((target - m0) / (m1 - m0)).clamp(0.0, 1.0);
    Ok((r0.log2() + t * (r1.log2() - r0.log2())).exp2())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: [(f64, f64); 4] = [(2.0, 0.90), (4.0, 0.895), (8.0, 0.88), (16.0, 0.80)];

    #[test]
    fn interpolates_between_grid_points() {
        // Target 0.9 * 0.99 = 0.891 falls between rate 4 (0.895) and 8 (0.88):
        // t = 0.004 / 0.015, so log2 r = 2 + 4/15.
        let r = select_rate(Some(0.9), &TABLE, 0.01, true).unwrap();
        assert!((r - 2f64.powf(2.0 + 4.0 / 15.0)).abs() < 1e-12, "{r}");
    }

    #[test]
    fn infinite_slack_takes_the_largest_rate() {
        assert_eq!(select_rate(Some(0.9), &TABLE, f64::INFINITY, true).unwrap(), 16.0);
    }

    #[test]
    fn zero_slack_on_a_flat_start() {
        assert_eq!(select_rate(Some(0.9), &TABLE, 0.0, true).unwrap(), 2.0);
    }

    #[test]
    fn lower_is_better_for_losses() {
        let table = [(2.0, 1.0), (4.0, 1.2)];
        // Target 1.1 is halfway between the two points in metric.
        let r = select_rate(Some(1.0), &table, 0.1, false).unwrap();
        assert!((r - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn missing_baseline_is_a_config_error() {
        assert!(matches!(select_rate(None, &TABLE, 0.01, true), Err(CliError::Config { .. })));
    }
}
